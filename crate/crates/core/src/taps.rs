//! Encoder taps bound into an autodiff graph as constants.

use crate::autodiff::{Graph, Var};
use crate::encoder::{Attribute, LayerAttributes};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// One layer's taps as graph constants. Only the attributes a decoder
/// actually reads are bound.
#[derive(Clone, Copy, Debug)]
pub struct LayerTapVars {
    attrs: [Option<Var>; 3],
    /// `T × P × (H·D)`.
    pub patches: Var,
    pub frames: usize,
    pub patch_count: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl LayerTapVars {
    /// `T × P × H × D` constant for `which`.
    pub fn attribute(&self, which: Attribute) -> Result<Var> {
        self.attrs[which as usize]
            .ok_or_else(|| Error::Config(format!("attribute {} was not bound for this layer", which.as_str())))
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

pub fn bind_taps<T: Scalar>(g: &mut Graph<T>, taps: &LayerAttributes, needed: &[Attribute]) -> LayerTapVars {
    let mut attrs = [None; 3];
    for &a in needed {
        if attrs[a as usize].is_none() {
            attrs[a as usize] = Some(g.constant(taps.attribute(a).cast::<T>()));
        }
    }
    LayerTapVars {
        attrs,
        patches: g.constant(taps.patches.cast::<T>()),
        frames: taps.frames(),
        patch_count: taps.patch_count(),
        heads: taps.heads(),
        head_dim: taps.head_dim(),
    }
}
