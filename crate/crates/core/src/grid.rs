use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::State;

/// Dense row-major table over the `(x, ℓ)` state grid.
///
/// Serialized as a list of rows, one per queue length.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    /// `rows = X + 1`, `cols = L + 1`.
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for x in 0..rows {
            for ell in 0..cols {
                data.push(f(x, ell));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index_of(&self, x: usize, ell: usize) -> usize {
        debug_assert!(x < self.rows && ell < self.cols);
        x * self.cols + ell
    }

    #[inline]
    pub fn get(&self, x: usize, ell: usize) -> &T {
        &self.data[self.index_of(x, ell)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, ell: usize) -> &mut T {
        let i = self.index_of(x, ell);
        &mut self.data[i]
    }

    #[inline]
    pub fn at(&self, s: State) -> &T {
        self.get(s.x, s.ell)
    }

    #[inline]
    pub fn at_mut(&mut self, s: State) -> &mut T {
        self.get_mut(s.x, s.ell)
    }

    pub fn row(&self, x: usize) -> &[T] {
        &self.data[x * self.cols..(x + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn iter_states(&self) -> impl Iterator<Item = State> + '_ {
        (0..self.rows).flat_map(move |x| (0..self.cols).map(move |ell| State::new(x, ell)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(&mut f).collect(),
        }
    }
}

impl Grid<f64> {
    pub fn sup_distance(&self, other: &Grid<f64>) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Serialize> Serialize for Grid<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[T]> = self.data.chunks(self.cols.max(1)).collect();
        rows.serialize(serializer)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Grid<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(deserializer)?;
        let nrows = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("grid rows have unequal lengths"));
        }
        Ok(Grid {
            rows: nrows,
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }
}
