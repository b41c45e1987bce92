use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{LabError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    /// Residual stream after a layer's attention block.
    ResidualPost,
    /// One head's contribution to the residual stream.
    HeadOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    At(usize),
    All,
}

/// Names one activation site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub kind: SiteKind,
    pub layer: usize,
    pub head: Option<usize>,
    pub position: Position,
}

impl SiteId {
    pub fn residual(layer: usize, position: Position) -> Self {
        SiteId {
            kind: SiteKind::ResidualPost,
            layer,
            head: None,
            position,
        }
    }

    pub fn head(layer: usize, head: usize, position: Position) -> Self {
        SiteId {
            kind: SiteKind::HeadOutput,
            layer,
            head: Some(head),
            position,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(LabError::IndexOutOfRange {
                what: "layer",
                index: self.layer,
                size: config.n_layers,
            });
        }
        match (self.kind, self.head) {
            (SiteKind::HeadOutput, Some(h)) if h < config.n_heads => Ok(()),
            (SiteKind::HeadOutput, Some(h)) => Err(LabError::IndexOutOfRange {
                what: "head",
                index: h,
                size: config.n_heads,
            }),
            (SiteKind::HeadOutput, None) => Err(LabError::InvalidArgument(
                "HeadOutput site needs a head index".into(),
            )),
            (SiteKind::ResidualPost, None) => Ok(()),
            (SiteKind::ResidualPost, Some(_)) => Err(LabError::InvalidArgument(
                "ResidualPost site takes no head index".into(),
            )),
        }
    }

    /// Shape of the replacement expected for a sequence of length `seq`.
    pub fn slice_shape(&self, config: &ModelConfig, seq: usize) -> Vec<usize> {
        match self.position {
            Position::At(_) => vec![config.d_model],
            Position::All => vec![seq, config.d_model],
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SiteKind::ResidualPost => write!(f, "resid_post[L{}]", self.layer)?,
            SiteKind::HeadOutput => {
                write!(f, "head[L{}H{}]", self.layer, self.head.unwrap_or(usize::MAX))?
            }
        }
        match self.position {
            Position::At(p) => write!(f, "@{p}"),
            Position::All => write!(f, "@all"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub site: SiteId,
    pub replacement: Tensor,
}

impl Intervention {
    pub fn new(site: SiteId, replacement: Tensor) -> Self {
        Intervention { site, replacement }
    }

    pub(crate) fn validate(&self, config: &ModelConfig, seq: usize) -> Result<()> {
        self.site.validate(config)?;
        if let Position::At(p) = self.site.position {
            if p >= seq {
                return Err(LabError::IndexOutOfRange {
                    what: "position",
                    index: p,
                    size: seq,
                });
            }
        }
        let expected = self.site.slice_shape(config, seq);
        if self.replacement.shape() != expected.as_slice() {
            return Err(LabError::SiteShapeMismatch {
                site: self.site.to_string(),
                expected,
                got: self.replacement.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Every site's activation for one forward pass (`[seq, d_model]` each).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub residual_post: Vec<Tensor>,
    /// Indexed `[layer][head]`.
    pub head_output: Vec<Vec<Tensor>>,
}

impl ActivationTrace {
    pub(crate) fn empty(n_layers: usize) -> Self {
        ActivationTrace {
            residual_post: vec![Tensor::zeros(&[0]); n_layers],
            head_output: vec![Vec::new(); n_layers],
        }
    }

    fn full(&self, site: &SiteId) -> Option<&Tensor> {
        match site.kind {
            SiteKind::ResidualPost => self.residual_post.get(site.layer),
            SiteKind::HeadOutput => self
                .head_output
                .get(site.layer)
                .and_then(|hs| hs.get(site.head?)),
        }
    }

    /// The captured value at `site`: one row for a position, the whole
    /// `[seq, d_model]` matrix for [`Position::All`].
    pub fn get(&self, site: &SiteId) -> Option<Tensor> {
        let full = self.full(site)?;
        match site.position {
            Position::All => Some(full.clone()),
            Position::At(p) => {
                let rows = full.shape()[0];
                (p < rows).then(|| {
                    Tensor::new(vec![full.shape()[1]], full.row(p).to_vec()).expect("row shape")
                })
            }
        }
    }

    /// An intervention that writes this trace's value at `site`.
    pub fn patch(&self, site: SiteId) -> Option<Intervention> {
        self.get(&site).map(|t| Intervention::new(site, t))
    }
}
