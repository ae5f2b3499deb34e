#![allow(dead_code)]

use std::path::PathBuf;

use num_complex::Complex64;
use proptest::prelude::*;
use spde_lyap::{Model, ModelDocument, NoiseEntry, NoiseTensor, SpectrumSpec};

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn models_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

/// Test model M₁ shipped in `models/m1.json`.
pub fn m1() -> Model {
    ModelDocument::from_path(&models_dir().join("m1.json"))
        .unwrap()
        .build()
        .unwrap()
}

pub fn m1_spectrum() -> SpectrumSpec {
    SpectrumSpec::from_lists(&[0.0, -1.0, -2.0], &[1.0, 2.0, 3.0], &[1.0; 3], &[-10.0, 0.0, 0.0])
}

pub fn zero_noise(spectrum: SpectrumSpec, q: f64) -> Model {
    Model::build(spectrum, NoiseTensor::zero(3), 0.0, q, 0.5).unwrap()
}

/// Raw random model data: eigenvalues and a sparse tensor.
#[derive(Debug, Clone)]
pub struct RawModel {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub b_prime: f64,
    pub q: f64,
    pub entries: Vec<(i64, i64, i64, f64, f64)>,
}

impl RawModel {
    pub fn build(&self) -> Model {
        let k = self.a.len();
        let spec = SpectrumSpec::from_lists(&self.a, &self.b, &vec![1.0; k], &{
            let mut bp = vec![0.0; k];
            bp[0] = self.b_prime;
            bp
        });
        let mut seen = std::collections::BTreeSet::new();
        let entries = self
            .entries
            .iter()
            .filter(|e| seen.insert((e.0, e.1, e.2)) && !seen.contains(&(-e.0, -e.1, -e.2)))
            .map(|&(j, kk, m, re, im)| NoiseEntry::new(j, kk, m, c(re, im)))
            .collect();
        Model::build(spec, NoiseTensor::new(entries, 2, 10.0, 10.0), 0.0, self.q, 0.5).unwrap()
    }
}

fn nonzero_mode(k: usize) -> impl Strategy<Value = i64> {
    (1..=k as i64, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m })
}

/// Valid random models with 3 positive modes and `K_W = 2`.
pub fn raw_model() -> impl Strategy<Value = RawModel> {
    let entry = (nonzero_mode(3), -2i64..=2, nonzero_mode(3), -0.4..0.4f64, -0.4..0.4f64);
    (
        (0.3..2.0f64, 0.1..2.0f64),
        prop::collection::vec(0.5..4.0f64, 3),
        -5.0..5.0f64,
        -1.0..1.0f64,
        prop::collection::vec(entry, 1..8),
    )
        .prop_map(|((a2, gap), b, b_prime, q, entries)| RawModel {
            a: vec![0.0, -a2, -a2 - gap],
            b,
            b_prime,
            q,
            entries,
        })
}
