//! Flat parameter storage with a (layer, role) index map.
//!
//! Running batch-norm statistics live in the same vector as the trainable
//! parameters so that they travel through aggregation like everything else.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use bitflags::bitflags;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::spec::{LayerKind, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

bitflags! {
    #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
    pub struct RoleMask: u8 {
        const WEIGHT = 1;
        const BIAS = 1 << 1;
        const BN_GAMMA = 1 << 2;
        const BN_BETA = 1 << 3;
        const BN_RUNNING_MEAN = 1 << 4;
        const BN_RUNNING_VAR = 1 << 5;

        const BN_AFFINE = Self::BN_GAMMA.bits() | Self::BN_BETA.bits();
        const RUNNING_STATS = Self::BN_RUNNING_MEAN.bits() | Self::BN_RUNNING_VAR.bits();
        const TRAINABLE = Self::WEIGHT.bits() | Self::BIAS.bits() | Self::BN_AFFINE.bits();
    }
}

impl ParamRole {
    pub fn mask(self) -> RoleMask {
        match self {
            ParamRole::Weight => RoleMask::WEIGHT,
            ParamRole::Bias => RoleMask::BIAS,
            ParamRole::BnGamma => RoleMask::BN_GAMMA,
            ParamRole::BnBeta => RoleMask::BN_BETA,
            ParamRole::BnRunningMean => RoleMask::BN_RUNNING_MEAN,
            ParamRole::BnRunningVar => RoleMask::BN_RUNNING_VAR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub layer: usize,
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
}

impl ParamSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Index map from `(layer, role)` to a slice of the flat vector. Slots are
/// laid out back to back in layer order, so they are disjoint and cover the
/// vector by construction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    len: usize,
}

impl ParamLayout {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |layer, role, len| {
            slots.push(ParamSlot {
                layer,
                role,
                offset,
                len,
            });
            offset += len;
        };
        for (i, l) in spec.layers().iter().enumerate() {
            match l.kind {
                LayerKind::Dense => {
                    push(i, ParamRole::Weight, l.input * l.output);
                    push(i, ParamRole::Bias, l.output);
                }
                LayerKind::Batchnorm => {
                    for role in [
                        ParamRole::BnGamma,
                        ParamRole::BnBeta,
                        ParamRole::BnRunningMean,
                        ParamRole::BnRunningVar,
                    ] {
                        push(i, role, l.output);
                    }
                }
                LayerKind::Relu | LayerKind::SoftmaxHead => {}
            }
        }
        Self {
            slots,
            len: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, layer: usize, role: ParamRole) -> Option<&ParamSlot> {
        self.slots
            .iter()
            .find(|s| s.layer == layer && s.role == role)
    }

    pub(crate) fn range(&self, layer: usize, role: ParamRole) -> std::ops::Range<usize> {
        self.slot(layer, role)
            .map(ParamSlot::range)
            .unwrap_or_else(|| panic!("layout has no {role:?} slot for layer {layer}"))
    }

    /// Flat per-coordinate membership in `mask`.
    pub fn coordinate_mask(&self, mask: RoleMask) -> Vec<bool> {
        let mut out = vec![false; self.len];
        for s in &self.slots {
            if mask.contains(s.role.mask()) {
                out[s.range()].fill(true);
            }
        }
        out
    }

    /// Roles actually present in this layout.
    pub fn roles_present(&self) -> RoleMask {
        self.slots
            .iter()
            .fold(RoleMask::empty(), |m, s| m | s.role.mask())
    }
}

fn same_layout(a: &Arc<ParamLayout>, b: &Arc<ParamLayout>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Model state θ.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::dim(format!(
                "layout expects {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        let v = Self { layout, values };
        if v.running_var_min() < 0.0 {
            return Err(Error::Numeric("negative running variance".into()));
        }
        Ok(v)
    }

    /// He-initialised dense weights, zero biases, identity batch-norm.
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng) -> Self {
        let layout = Arc::new(ParamLayout::for_spec(spec));
        let mut values = vec![0.0; layout.len()];
        for s in layout.slots() {
            let layer = &spec.layers()[s.layer];
            match s.role {
                ParamRole::Weight => {
                    let std = (2.0 / layer.input as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    for v in &mut values[s.range()] {
                        *v = normal.sample(rng);
                    }
                }
                ParamRole::BnGamma | ParamRole::BnRunningVar => values[s.range()].fill(1.0),
                _ => {}
            }
        }
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, layer: usize, role: ParamRole) -> &[f64] {
        &self.values[self.layout.range(layer, role)]
    }

    pub fn slice_mut(&mut self, layer: usize, role: ParamRole) -> &mut [f64] {
        let r = self.layout.range(layer, role);
        &mut self.values[r]
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        same_layout(&self.layout, &other.layout)
    }

    pub(crate) fn check_shape(&self, layout: &Arc<ParamLayout>) -> Result<()> {
        if same_layout(&self.layout, layout) {
            Ok(())
        } else {
            Err(Error::dim("parameter layouts differ"))
        }
    }

    fn running_var_min(&self) -> f64 {
        self.layout
            .slots()
            .iter()
            .filter(|s| s.role == ParamRole::BnRunningVar)
            .flat_map(|s| self.values[s.range()].iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Clamp running variances at zero. Aggregation with a server scale above
    /// one can overshoot.
    pub fn clamp_running_var(&mut self) {
        for s in self.layout.slots().to_vec() {
            if s.role == ParamRole::BnRunningVar {
                for v in &mut self.values[s.range()] {
                    *v = v.max(0.0);
                }
            }
        }
    }

    /// `self − base` restricted to `mask`.
    pub fn delta_from(&self, base: &ParamVector, mask: RoleMask) -> Result<ParamDelta> {
        self.check_shape(&base.layout)?;
        let values = self
            .values
            .iter()
            .zip(&base.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamDelta::masked(self.layout.clone(), values, mask))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Write the flat little-endian f64 array to `path` and the index map to
    /// `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        fs::write(
            path.with_extension("json"),
            serde_json::to_vec_pretty(&*self.layout)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let layout: ParamLayout = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        let bytes = fs::read(path)?;
        if bytes.len() != layout.len() * 8 {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                field: "payload",
                reason: format!("expected {} bytes, got {}", layout.len() * 8, bytes.len()),
            });
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_values(Arc::new(layout), values)
    }
}

/// Update Δθ. Coordinates outside `mask` are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDelta {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
    mask: RoleMask,
}

impl ParamDelta {
    pub fn zeros(layout: Arc<ParamLayout>, mask: RoleMask) -> Self {
        let values = vec![0.0; layout.len()];
        Self {
            layout,
            values,
            mask,
        }
    }

    /// Build a delta, zeroing every coordinate outside `mask`.
    pub fn masked(layout: Arc<ParamLayout>, mut values: Vec<f64>, mask: RoleMask) -> Self {
        debug_assert_eq!(values.len(), layout.len());
        for s in layout.slots() {
            if !mask.contains(s.role.mask()) {
                values[s.range()].fill(0.0);
            }
        }
        Self {
            layout,
            values,
            mask,
        }
    }

    /// The full vector reinterpreted as a delta over every role.
    pub fn from_params(p: &ParamVector) -> Self {
        Self {
            layout: p.layout.clone(),
            values: p.values.clone(),
            mask: RoleMask::all(),
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> RoleMask {
        self.mask
    }

    pub fn slice(&self, layer: usize, role: ParamRole) -> &[f64] {
        &self.values[self.layout.range(layer, role)]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| v * k).collect(),
            mask: self.mask,
        }
    }

    pub fn dot(&self, other: &ParamDelta) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn same_shape(&self, other: &ParamDelta) -> bool {
        same_layout(&self.layout, &other.layout)
    }

    /// `self + k·other`; the result carries the union of both masks.
    pub fn add_scaled(&self, k: f64, other: &ParamDelta) -> Result<ParamDelta> {
        if !self.same_shape(other) {
            return Err(Error::dim("delta layouts differ"));
        }
        Ok(Self {
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + k * b)
                .collect(),
            mask: self.mask | other.mask,
        })
    }

    pub fn restrict(&self, mask: RoleMask) -> Self {
        Self::masked(self.layout.clone(), self.values.clone(), self.mask & mask)
    }
}

/// `y + a·x`, preserving the index map.
pub fn param_axpy(a: f64, x: &ParamDelta, y: &ParamVector) -> Result<ParamVector> {
    y.check_shape(&x.layout)?;
    Ok(ParamVector {
        layout: y.layout.clone(),
        values: y
            .values
            .iter()
            .zip(&x.values)
            .map(|(yv, xv)| yv + a * xv)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> ModelSpec {
        ModelSpec::mlp(5, &[8], 3).unwrap()
    }

    #[test]
    fn layout_is_disjoint_and_covering() {
        let layout = ParamLayout::for_spec(&spec());
        let mut covered = vec![0u8; layout.len()];
        for s in layout.slots() {
            for i in s.range() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        let total: usize = layout.slots().iter().map(|s| s.len).sum();
        assert_eq!(total, layout.len());
        // 5*8 + 8 + 4*8 + 8*3 + 3
        assert_eq!(layout.len(), 107);
    }

    #[test]
    fn masked_delta_zeroes_other_roles() {
        let p = ParamVector::init(&spec(), &mut ChaCha8Rng::seed_from_u64(1));
        let zero = ParamVector::zeros(p.layout().clone());
        let d = p.delta_from(&zero, RoleMask::BN_AFFINE).unwrap();
        for s in p.layout().slots() {
            let expect_nonzero = RoleMask::BN_AFFINE.contains(s.role.mask());
            if !expect_nonzero {
                assert!(d.values()[s.range()].iter().all(|&v| v == 0.0));
            }
        }
        assert!(d.slice(1, ParamRole::BnGamma).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn axpy_cases() {
        let y = ParamVector::init(&spec(), &mut ChaCha8Rng::seed_from_u64(2));
        let x = ParamDelta::from_params(&y);
        assert_eq!(param_axpy(0.0, &x, &y).unwrap(), y);
        let neg = x.scaled(-1.0);
        let z = param_axpy(1.0, &neg, &y).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        // scalar loop oracle
        let a = 0.37;
        let out = param_axpy(a, &x, &y).unwrap();
        for i in 0..y.len() {
            assert_eq!(out.values()[i], y.values()[i] + a * x.values()[i]);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ParamVector::init(&spec(), &mut ChaCha8Rng::seed_from_u64(3));
        let path = dir.path().join("model.bin");
        p.save(&path).unwrap();
        let q = ParamVector::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_negative_running_var() {
        let p = ParamVector::init(&spec(), &mut ChaCha8Rng::seed_from_u64(4));
        let mut values = p.values().to_vec();
        let r = p.layout().range(1, ParamRole::BnRunningVar);
        values[r.start] = -1.0;
        assert!(ParamVector::from_values(p.layout().clone(), values).is_err());
    }
}
