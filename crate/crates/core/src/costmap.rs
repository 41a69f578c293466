use crate::error::{Error, Result};
use crate::gridmap::MapMeta;

/// Out-of-map states are charged this multiple of the largest cell cost.
pub const OUT_OF_BOUNDS_FACTOR: f64 = 10.0;

/// A scalar traversal cost per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Costmap {
    pub meta: MapMeta,
    values: Vec<f64>,
    out_of_bounds: f64,
}

impl Costmap {
    pub fn new(meta: MapMeta, values: Vec<f64>) -> Result<Self> {
        if values.len() != meta.n_cells() {
            return Err(Error::data(format!(
                "costmap has {} values, expected {}",
                values.len(),
                meta.n_cells()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite costmap entry at cell {k}")));
        }
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { meta, values, out_of_bounds: OUT_OF_BOUNDS_FACTOR * max.max(0.0) })
    }

    pub fn constant(meta: MapMeta, value: f64) -> Result<Self> {
        Self::new(meta, vec![value; meta.n_cells()])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.meta.ny + j]
    }

    pub fn out_of_bounds_cost(&self) -> f64 {
        self.out_of_bounds
    }

    /// Cost at a world position; positions outside the map pay the
    /// out-of-bounds cost.
    #[inline]
    pub fn at(&self, x: f64, y: f64) -> f64 {
        match self.meta.flat_index_of(x, y) {
            Some(k) => self.values[k],
            None => self.out_of_bounds,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_payloads() {
        let meta = MapMeta::new([0.0, 0.0], [2.0, 2.0], 1.0).unwrap();
        assert!(Costmap::new(meta, vec![0.0; 3]).is_err());
        assert!(matches!(Costmap::new(meta, vec![0.0, 1.0, f64::NAN, 0.0]), Err(Error::Data(_))));
    }

    #[test]
    fn out_of_bounds_is_ten_times_max() {
        let meta = MapMeta::new([0.0, 0.0], [2.0, 2.0], 1.0).unwrap();
        let c = Costmap::new(meta, vec![0.5, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(c.out_of_bounds_cost(), 30.0);
        assert_eq!(c.at(1.5, 0.5), 3.0);
        assert_eq!(c.at(-0.1, 0.5), 30.0);
        assert_eq!(Costmap::constant(meta, -1.0).unwrap().out_of_bounds_cost(), 0.0);
    }
}
