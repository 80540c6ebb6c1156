//! Flat parameter vectors with a named block registry.
//!
//! Optimizers and the finite-difference checker work on one flat array; the
//! registry maps named blocks (identity, per-frame pose/light/expression,
//! and optionally the learnable model matrices) to index ranges with
//! active/frozen flags. Matrices flatten column-major.

use crate::error::{Error, Result};
use crate::model::{FaceModel, FrameParams, IdentityParams};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Alpha,
    Beta,
    Rotation(usize),
    Translation(usize),
    Gamma(usize),
    Delta(usize),
    GeomBasis,
    AppearBasis,
    AppearMean,
}

impl BlockKind {
    pub fn is_model_block(&self) -> bool {
        matches!(self, BlockKind::GeomBasis | BlockKind::AppearBasis | BlockKind::AppearMean)
    }

    pub fn is_frame_block(&self) -> bool {
        matches!(
            self,
            BlockKind::Rotation(_) | BlockKind::Translation(_) | BlockKind::Gamma(_) | BlockKind::Delta(_)
        )
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockKind::Alpha => write!(f, "alpha"),
            BlockKind::Beta => write!(f, "beta"),
            BlockKind::Rotation(i) => write!(f, "rotation[{i}]"),
            BlockKind::Translation(i) => write!(f, "translation[{i}]"),
            BlockKind::Gamma(i) => write!(f, "gamma[{i}]"),
            BlockKind::Delta(i) => write!(f, "delta[{i}]"),
            BlockKind::GeomBasis => write!(f, "geom_basis"),
            BlockKind::AppearBasis => write!(f, "appear_basis"),
            BlockKind::AppearMean => write!(f, "appear_mean"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub kind: BlockKind,
    pub offset: usize,
    pub len: usize,
    pub active: bool,
}

/// All optimization variables of one evaluation, flattened.
#[derive(Debug, Clone)]
pub struct ParamVector {
    pub data: Vec<f64>,
    blocks: Vec<Block>,
}

impl ParamVector {
    /// Layout for one sample against a model: identity, per-frame blocks,
    /// and (when `with_model` is set) the learnable model blocks.
    pub fn layout(model: &FaceModel, frame_count: usize, with_model: bool) -> Self {
        let g = model.identity_dim();
        let nb = model.appearance_dim();
        let b = model.expression_dim();
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        let push = |kind: BlockKind, len: usize, offset: &mut usize, blocks: &mut Vec<Block>| {
            blocks.push(Block { kind, offset: *offset, len, active: true });
            *offset += len;
        };
        push(BlockKind::Alpha, g, &mut offset, &mut blocks);
        push(BlockKind::Beta, nb, &mut offset, &mut blocks);
        for f in 0..frame_count {
            push(BlockKind::Rotation(f), 3, &mut offset, &mut blocks);
            push(BlockKind::Translation(f), 3, &mut offset, &mut blocks);
            push(BlockKind::Gamma(f), 27, &mut offset, &mut blocks);
            push(BlockKind::Delta(f), b, &mut offset, &mut blocks);
        }
        if with_model {
            push(BlockKind::GeomBasis, 3 * model.node_count() * g, &mut offset, &mut blocks);
            push(BlockKind::AppearBasis, 3 * model.vertex_count() * nb, &mut offset, &mut blocks);
            push(BlockKind::AppearMean, 3 * model.vertex_count(), &mut offset, &mut blocks);
        }
        ParamVector { data: vec![0.0; offset], blocks }
    }

    /// Layout holding only the learnable model blocks.
    pub fn model_only(model: &FaceModel) -> Self {
        let g = model.identity_dim();
        let nb = model.appearance_dim();
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        for (kind, len) in [
            (BlockKind::GeomBasis, 3 * model.node_count() * g),
            (BlockKind::AppearBasis, 3 * model.vertex_count() * nb),
            (BlockKind::AppearMean, 3 * model.vertex_count()),
        ] {
            blocks.push(Block { kind, offset, len, active: true });
            offset += len;
        }
        ParamVector { data: vec![0.0; offset], blocks }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn frame_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| matches!(b.kind, BlockKind::Rotation(_)))
            .count()
    }

    pub fn has_model_blocks(&self) -> bool {
        self.blocks.iter().any(|b| b.kind.is_model_block())
    }

    pub fn block(&self, kind: BlockKind) -> Option<&Block> {
        self.blocks.iter().find(|b| b.kind == kind)
    }

    pub fn slice(&self, kind: BlockKind) -> Option<&[f64]> {
        self.block(kind).map(|b| &self.data[b.offset..b.offset + b.len])
    }

    pub fn set_active<F: Fn(BlockKind) -> bool>(&mut self, pred: F) {
        for b in &mut self.blocks {
            b.active = pred(b.kind);
        }
    }

    pub fn active_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.active).map(|b| b.len).sum()
    }

    /// Copy identity and frame parameters into the vector.
    pub fn gather_sample(&mut self, identity: &IdentityParams, frames: &[FrameParams]) {
        for b in &self.blocks {
            let dst = &mut self.data[b.offset..b.offset + b.len];
            match b.kind {
                BlockKind::Alpha => dst.copy_from_slice(identity.alpha.as_slice()),
                BlockKind::Beta => dst.copy_from_slice(identity.beta.as_slice()),
                BlockKind::Rotation(f) => dst.copy_from_slice(&frames[f].rotation),
                BlockKind::Translation(f) => dst.copy_from_slice(&frames[f].translation),
                BlockKind::Gamma(f) => dst.copy_from_slice(&frames[f].gamma),
                BlockKind::Delta(f) => dst.copy_from_slice(frames[f].delta.as_slice()),
                _ => {}
            }
        }
    }

    /// Copy the learnable model blocks into the vector.
    pub fn gather_model(&mut self, model: &FaceModel) {
        for b in &self.blocks {
            let dst = &mut self.data[b.offset..b.offset + b.len];
            match b.kind {
                BlockKind::GeomBasis => dst.copy_from_slice(model.geom_basis.as_slice()),
                BlockKind::AppearBasis => dst.copy_from_slice(model.appear_basis.as_slice()),
                BlockKind::AppearMean => dst.copy_from_slice(&model.appear_mean),
                _ => {}
            }
        }
    }

    /// Write the vector back into structured parameters.
    pub fn scatter_sample(&self, identity: &mut IdentityParams, frames: &mut [FrameParams]) {
        for b in &self.blocks {
            let src = &self.data[b.offset..b.offset + b.len];
            match b.kind {
                BlockKind::Alpha => identity.alpha.as_mut_slice().copy_from_slice(src),
                BlockKind::Beta => identity.beta.as_mut_slice().copy_from_slice(src),
                BlockKind::Rotation(f) => frames[f].rotation.copy_from_slice(src),
                BlockKind::Translation(f) => frames[f].translation.copy_from_slice(src),
                BlockKind::Gamma(f) => frames[f].gamma.copy_from_slice(src),
                BlockKind::Delta(f) => frames[f].delta.as_mut_slice().copy_from_slice(src),
                _ => {}
            }
        }
    }

    /// Write the model blocks back into the model.
    pub fn scatter_model(&self, model: &mut FaceModel) {
        for b in &self.blocks {
            let src = &self.data[b.offset..b.offset + b.len];
            match b.kind {
                BlockKind::GeomBasis => model.geom_basis.as_mut_slice().copy_from_slice(src),
                BlockKind::AppearBasis => model.appear_basis.as_mut_slice().copy_from_slice(src),
                BlockKind::AppearMean => model.appear_mean.copy_from_slice(src),
                _ => {}
            }
        }
    }

    /// Structured copies sized like this layout.
    pub fn to_structured(&self, model: &FaceModel) -> (IdentityParams, Vec<FrameParams>) {
        let mut identity = IdentityParams::zeros(model.identity_dim(), model.appearance_dim());
        let mut frames = vec![FrameParams::neutral(model.expression_dim()); self.frame_count()];
        self.scatter_sample(&mut identity, &mut frames);
        (identity, frames)
    }

    /// First block whose range contains a non-finite value, if any.
    pub fn first_non_finite(&self, values: &[f64]) -> Option<BlockKind> {
        for b in &self.blocks {
            if values[b.offset..b.offset + b.len].iter().any(|v| !v.is_finite()) {
                return Some(b.kind);
            }
        }
        None
    }
}

/// Rebuild matrices from flattened model blocks (column-major).
pub fn matrix_from_block(data: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "block length {} does not match {rows}x{cols}",
            data.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, data))
}

pub fn vector_from_block(data: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(data)
}
