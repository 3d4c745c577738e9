//! Single-pass warping through a rigid transform followed by a dense field.
//!
//! The output lives on the field's grid (the fixed image). The value at `x`
//! is read from the input at `T1^-1(x + u(x))`.

use crate::error::Result;
use crate::field::DisplacementField;
use crate::rigid::RigidTransform;
use crate::volume::{Boundary, Interp, Mask, Volume};

#[derive(Debug, Clone)]
pub struct CompositeTransform {
    pub rigid: RigidTransform,
    pub field: DisplacementField,
}

impl CompositeTransform {
    pub fn new(rigid: RigidTransform, field: DisplacementField) -> Result<Self> {
        rigid.validate()?;
        Ok(CompositeTransform { rigid, field })
    }

    /// Input-space point for the output point `x`.
    #[inline]
    pub fn source_point(&self, idx: usize) -> [f64; 3] {
        let g = self.field.grid();
        let [i, j, k] = g.coords(idx);
        let x = g.world(i, j, k);
        let u = self.field.at(idx);
        self.rigid.apply_inverse([x[0] + u[0], x[1] + u[1], x[2] + u[2]])
    }

    fn is_identity_on(&self, vol_grid: &crate::volume::GridMeta) -> bool {
        self.rigid.is_identity() && self.field.is_zero() && vol_grid.matches(self.field.grid())
    }
}

pub fn apply_composite(vol: &Volume, t: &CompositeTransform, mode: Interp) -> Volume {
    apply_composite_with(vol, t, mode, Boundary::Minimum)
}

pub fn apply_composite_with(
    vol: &Volume,
    t: &CompositeTransform,
    mode: Interp,
    boundary: Boundary,
) -> Volume {
    if t.is_identity_on(vol.grid()) {
        return vol.clone();
    }
    let g = *t.field.grid();
    let s = vol.sampler(mode, boundary);
    Volume::from_fn(g, vol.unit(), |i, j, k| s.sample(t.source_point(g.index(i, j, k))))
}

/// `output(x) = vol(x + u(x))` on the field's grid.
pub fn apply_field(vol: &Volume, field: &DisplacementField, mode: Interp, boundary: Boundary) -> Volume {
    let t = CompositeTransform {
        rigid: RigidTransform::identity(field.grid().center()),
        field: field.clone(),
    };
    apply_composite_with(vol, &t, mode, boundary)
}

/// Nearest-neighbor mask warp; points mapping outside the input are unset.
pub fn warp_mask(mask: &Mask, t: &CompositeTransform) -> Mask {
    if t.is_identity_on(mask.grid()) {
        return mask.clone();
    }
    let v = apply_composite_with(&mask.to_volume(), t, Interp::Nearest, Boundary::Constant(0.0));
    Mask::from_volume(&v)
}
