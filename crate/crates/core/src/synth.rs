//! Synthetic spiral-and-column scalar fields on a 2D+time grid.
//!
//! Spirals are Gaussian bumps whose centers travel along helices through
//! time, alternating in sign so both maxima and minima appear. Columns are
//! static positive bumps, which sweep out straight tubes in spacetime. A
//! few low-frequency waves with seeded phases add smooth noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idspace::Dims;
use crate::mesh::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: Dims,
    pub seed: u64,
    pub n_spirals: usize,
    pub n_columns: usize,
    /// Gaussian standard deviation in grid units.
    pub bump_width: f64,
    pub amplitude: f64,
    /// Peak amplitude of the smooth noise term; 0 disables it.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(dims: Dims, seed: u64) -> Self {
        SynthSpec {
            dims,
            seed,
            n_spirals: 2,
            n_columns: 1,
            bump_width: 3.0,
            amplitude: 1.0,
            noise: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
struct Bump {
    cx: f64,
    cy: f64,
    radius: f64,
    omega: f64,
    phase: f64,
    sign: f64,
}

impl Bump {
    fn center(&self, t: f64) -> (f64, f64) {
        let a = self.phase + self.omega * t;
        (self.cx + self.radius * a.cos(), self.cy + self.radius * a.sin())
    }
}

#[derive(Clone, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    kt: f64,
    phase: f64,
}

fn plan(spec: &SynthSpec) -> (Vec<Bump>, Vec<Wave>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.dims.extents();
    let (nt, ny, nx) = (e[0] as f64, e[1] as f64, e[2] as f64);
    let span = nx.min(ny);
    let mut bumps = Vec::new();
    for i in 0..spec.n_spirals {
        let turns = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        bumps.push(Bump {
            cx: rng.gen_range(0.3..0.7) * nx,
            cy: rng.gen_range(0.3..0.7) * ny,
            radius: rng.gen_range(0.1..0.25) * span,
            omega: turns * TAU / nt.max(1.0),
            phase: rng.gen_range(0.0..TAU),
            sign: if i % 2 == 0 { 1.0 } else { -1.0 },
        });
    }
    for _ in 0..spec.n_columns {
        bumps.push(Bump {
            cx: rng.gen_range(0.15..0.85) * nx,
            cy: rng.gen_range(0.15..0.85) * ny,
            radius: 0.0,
            omega: 0.0,
            phase: 0.0,
            sign: 1.0,
        });
    }
    let waves = (0..3)
        .map(|_| Wave {
            kx: rng.gen_range(1.0..3.0) * TAU / nx,
            ky: rng.gen_range(1.0..3.0) * TAU / ny,
            kt: rng.gen_range(0.5..2.0) * TAU / nt,
            phase: rng.gen_range(0.0..TAU),
        })
        .collect();
    (bumps, waves)
}

/// Generates the field. Deterministic for a given spec; values in [-1, 1].
pub fn generate(spec: &SynthSpec) -> Result<Volume> {
    let e = spec.dims.extents();
    if e.len() != 3 {
        return Err(Error::invalid(format!(
            "synthetic fields are 2D+time, got dims {}",
            spec.dims
        )));
    }
    if !(spec.bump_width > 0.0) || !spec.amplitude.is_finite() || !spec.noise.is_finite() {
        return Err(Error::invalid("bump width must be positive, amplitude and noise finite"));
    }
    let (bumps, waves) = plan(spec);
    let (ny, nx) = (e[1], e[2]);
    let inv = 1.0 / (2.0 * spec.bump_width * spec.bump_width);
    let noise_scale = spec.noise / waves.len() as f64;
    let mut values = vec![0f32; spec.dims.num_vertices() as usize];
    values
        .par_chunks_mut(ny * nx)
        .enumerate()
        .for_each(|(t, slice)| {
            let tf = t as f64;
            let centers: Vec<(f64, f64, f64)> = bumps
                .iter()
                .map(|b| {
                    let (x, y) = b.center(tf);
                    (x, y, b.sign)
                })
                .collect();
            for y in 0..ny {
                for x in 0..nx {
                    let (xf, yf) = (x as f64, y as f64);
                    let mut v = 0.0;
                    for &(cx, cy, s) in &centers {
                        let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                        v += s * spec.amplitude * (-d2 * inv).exp();
                    }
                    if noise_scale != 0.0 {
                        for w in &waves {
                            v += noise_scale * (w.kx * xf + w.ky * yf + w.kt * tf + w.phase).sin();
                        }
                    }
                    slice[y * nx + x] = v.clamp(-1.0, 1.0) as f32;
                }
            }
        });
    Volume::new(spec.dims.clone(), values)
}
