use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{clamp_unit, LabeledSet};
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// Constant offset along a random sign pattern.
    Shift,
    /// Contrast reduction around mid-grey.
    Scale,
    /// Additive Gaussian noise.
    Noise,
    /// Blend with the average of neighbouring coordinates.
    BlurMix,
    /// Corruption already baked into data loaded from disk.
    External,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [
        Corruption::Shift,
        Corruption::Scale,
        Corruption::Noise,
        Corruption::BlurMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::Shift => "shift",
            Corruption::Scale => "scale",
            Corruption::Noise => "noise",
            Corruption::BlurMix => "blur-mix",
            Corruption::External => "external",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption kind `{s}`")))
    }
}

/// A client's domain: corruption kind and severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Domain {
    pub kind: Corruption,
    pub severity: u8,
}

/// Apply `kind` at `severity` (0 = identity, 5 = strongest). Labels are kept.
pub fn corrupt(set: &LabeledSet, kind: Corruption, severity: u8, seed: u64) -> Result<LabeledSet> {
    if severity > 5 {
        return Err(Error::config(format!("severity {severity} outside 0..=5")));
    }
    if kind == Corruption::External {
        return Err(Error::config("external corruption cannot be synthesised"));
    }
    if severity == 0 {
        return Ok(set.clone());
    }
    let s = f64::from(severity);
    let mut rng: SimRng = rand::SeedableRng::seed_from_u64(seed);
    let mut x = set.inputs().clone();
    let d = x.cols();
    match kind {
        Corruption::Shift => {
            let a = 0.04 * s;
            let dir: Vec<f64> = (0..d)
                .map(|_| if rng.gen::<bool>() { a } else { -a })
                .collect();
            for i in 0..x.rows() {
                for (v, o) in x.row_mut(i).iter_mut().zip(&dir) {
                    *v += o;
                }
            }
        }
        Corruption::Scale => {
            let c = 1.0 - 0.14 * s;
            for v in x.as_mut_slice() {
                *v = 0.5 + (*v - 0.5) * c;
            }
        }
        Corruption::Noise => {
            let noise = Normal::new(0.0, 0.03 * s).expect("positive std");
            for v in x.as_mut_slice() {
                *v += noise.sample(&mut rng);
            }
        }
        Corruption::BlurMix => {
            let w = 0.18 * s;
            for i in 0..x.rows() {
                let row = x.row(i).to_vec();
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    let nb = 0.5 * (row[(j + d - 1) % d] + row[(j + 1) % d]);
                    *v = (1.0 - w) * row[j] + w * nb;
                }
            }
        }
        Corruption::External => unreachable!("rejected above"),
    }
    clamp_unit(&mut x);
    Ok(set.with_inputs(x))
}
