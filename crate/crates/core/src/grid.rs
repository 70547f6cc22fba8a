use serde::{Deserialize, Serialize};

/// Square raster stored row-major: index `v * size + u`, `u` the column and
/// `v` the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(size: usize, value: T) -> Self {
        Self {
            size,
            data: vec![value; size * size],
        }
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[v * self.size + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.size + u] = value;
    }

    /// Value at signed coordinates, `None` outside the raster.
    #[inline]
    pub fn get_signed(&self, u: i64, v: i64) -> Option<T> {
        if u < 0 || v < 0 || u >= self.size as i64 || v >= self.size as i64 {
            None
        } else {
            Some(self.get(u as usize, v as usize))
        }
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            size: self.size,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}
