//! Per-teacher statistics of the gating weights over held batches.

use serde::Serialize;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::Result;
use crate::tensor::Scalar;
use crate::train::{Distiller, Overrides};

pub const HISTOGRAM_BINS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaStats {
    pub teacher: usize,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Equal-width bins over `[0, 1]`; `α = 1` lands in the last bin.
    pub histogram: Vec<usize>,
}

impl AlphaStats {
    fn from_values(teacher: usize, values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // offsetting by the minimum keeps the mean of a constant exact
        let mean = min + values.iter().map(|v| v - min).sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut histogram = vec![0; HISTOGRAM_BINS];
        for v in values {
            let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        Self {
            teacher,
            count: values.len(),
            mean,
            std: var.sqrt(),
            min,
            max,
            histogram,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// α statistics per active teacher over the first `n_batches` training
/// batches of `dataset`, with the masks those steps would draw.
pub fn inspect_gating<T: Scalar>(d: &Distiller<T>, dataset: &Dataset, n_batches: usize) -> Result<Vec<AlphaStats>> {
    let m = d.num_teachers();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); m];
    for step in 0..n_batches as u64 {
        let batch = d.prepare(dataset, step)?;
        let mut tape = Tape::no_grad();
        let fv = d.forward(&mut tape, &batch, &Overrides::default())?;
        for (i, a) in tape.value(fv.alpha).data().iter().enumerate() {
            values[i % m].push(a.as_f64());
        }
    }
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, v)| AlphaStats::from_values(d.teacher_ids[i], v))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_have_exact_mean() {
        let third = (1.0f32 / 3.0) as f64;
        let s = AlphaStats::from_values(0, &vec![third; 1001]);
        assert_eq!(s.mean, third);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.histogram[5], 1001);
    }

    #[test]
    fn histogram_edges() {
        let s = AlphaStats::from_values(2, &[0.0, 1.0, 0.5, 0.0625]);
        assert_eq!(s.histogram[0], 1);
        assert_eq!(s.histogram[1], 1);
        assert_eq!(s.histogram[8], 1);
        assert_eq!(s.histogram[15], 1);
        assert_eq!(s.histogram.iter().sum::<usize>(), 4);
        assert!(s.to_json_line().starts_with("{\"teacher\":2"));
    }
}
