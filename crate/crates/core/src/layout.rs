//! Spatial arrangement of query and key elements.

use serde::{Deserialize, Serialize};

/// Token sequence or row-major 2-d grid. Coordinates are `[x]` for sequences
/// and `[x, y]` (column, row) for grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Seq { len: usize },
    Grid { width: usize, height: usize },
}

impl Layout {
    pub fn seq(len: usize) -> Self {
        Layout::Seq { len }
    }

    pub fn grid(width: usize, height: usize) -> Self {
        Layout::Grid { width, height }
    }

    pub fn len(&self) -> usize {
        match *self {
            Layout::Seq { len } => len,
            Layout::Grid { width, height } => width * height,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        match self {
            Layout::Seq { .. } => 1,
            Layout::Grid { .. } => 2,
        }
    }

    /// Largest extent along any axis.
    pub fn max_extent(&self) -> usize {
        match *self {
            Layout::Seq { len } => len,
            Layout::Grid { width, height } => width.max(height),
        }
    }

    pub fn coords(&self, index: usize) -> [i64; 2] {
        match *self {
            Layout::Seq { .. } => [index as i64, 0],
            Layout::Grid { width, .. } => [(index % width) as i64, (index / width) as i64],
        }
    }

    /// Flat index of an integer point, `None` outside the extent.
    pub fn index_of(&self, point: &[i64]) -> Option<usize> {
        match (*self, point) {
            (Layout::Seq { len }, [x]) | (Layout::Seq { len }, [x, 0]) => {
                (0..len as i64).contains(x).then_some(*x as usize)
            }
            (Layout::Grid { width, height }, [x, y]) => ((0..width as i64).contains(x)
                && (0..height as i64).contains(y))
            .then(|| *y as usize * width + *x as usize),
            _ => None,
        }
    }

    /// Element at `index` displaced by `offset`, if it stays inside.
    pub fn shifted(&self, index: usize, offset: [i64; 2]) -> Option<usize> {
        let [x, y] = self.coords(index);
        match self {
            Layout::Seq { .. } if offset[1] != 0 => None,
            Layout::Seq { .. } => self.index_of(&[x + offset[0]]),
            Layout::Grid { .. } => self.index_of(&[x + offset[0], y + offset[1]]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip() {
        let g = Layout::grid(4, 3);
        for i in 0..g.len() {
            assert_eq!(g.index_of(&g.coords(i)), Some(i));
        }
        assert_eq!(g.index_of(&[4, 0]), None);
        assert_eq!(g.index_of(&[0, -1]), None);
        assert_eq!(g.shifted(5, [1, 1]), Some(10));
    }

    #[test]
    fn seq_shift() {
        let s = Layout::seq(5);
        assert_eq!(s.shifted(0, [-1, 0]), None);
        assert_eq!(s.shifted(2, [2, 0]), Some(4));
        assert_eq!(s.shifted(2, [0, 1]), None);
    }
}
