use crate::error::{Error, Result};

/// Which context tokens each query row may mix.
///
/// `Causal` and `BlockCausal(k)` use the 1-indexed rule "row `i` sees
/// `j <= ceil(i / k) * k`", so every token sees its whole block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskSpec {
    None,
    Causal,
    BlockCausal(usize),
    /// Per-batch context validity, `batch x n`.
    Padding {
        batch: usize,
        context: usize,
        valid: Vec<bool>,
    },
    /// Explicit `batch x queries x context` visibility.
    Full {
        batch: usize,
        queries: usize,
        context: usize,
        visible: Vec<bool>,
    },
}

fn binary(op: &str, values: &[u8]) -> Result<Vec<bool>> {
    values
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Mask(format!("{op} entries must be 0 or 1, found {other}"))),
        })
        .collect()
}

impl MaskSpec {
    pub fn block_causal(block: usize) -> Result<Self> {
        if block == 0 {
            return Err(Error::Mask("block size must be at least 1".into()));
        }
        Ok(MaskSpec::BlockCausal(block))
    }

    pub fn padding(batch: usize, context: usize, values: &[u8]) -> Result<Self> {
        if values.len() != batch * context {
            return Err(Error::Mask(format!(
                "padding mask needs {} entries, got {}",
                batch * context,
                values.len()
            )));
        }
        Ok(MaskSpec::Padding {
            batch,
            context,
            valid: binary("padding", values)?,
        })
    }

    pub fn full(batch: usize, queries: usize, context: usize, values: &[u8]) -> Result<Self> {
        if values.len() != batch * queries * context {
            return Err(Error::Mask(format!(
                "full mask needs {} entries, got {}",
                batch * queries * context,
                values.len()
            )));
        }
        Ok(MaskSpec::Full {
            batch,
            queries,
            context,
            visible: binary("full", values)?,
        })
    }

    /// Block size for the causal family, `None` otherwise.
    pub fn block_size(&self) -> Option<usize> {
        match self {
            MaskSpec::Causal => Some(1),
            MaskSpec::BlockCausal(k) => Some(*k),
            _ => None,
        }
    }

    /// Number of mixed rows produced for `queries` query tokens, or `None`
    /// when the mask broadcasts one state to every query.
    pub fn rows(&self, queries: usize) -> Option<usize> {
        match self {
            MaskSpec::None | MaskSpec::Padding { .. } => None,
            MaskSpec::Causal | MaskSpec::BlockCausal(_) => Some(queries),
            MaskSpec::Full { queries, .. } => Some(*queries),
        }
    }

    /// Whether query `i` sees context token `j` (0-indexed) in batch `b`.
    pub fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        match self {
            MaskSpec::None => true,
            MaskSpec::Causal => j <= i,
            MaskSpec::BlockCausal(k) => j < (i / k + 1) * k,
            MaskSpec::Padding { context, valid, .. } => valid[b * context + j],
            MaskSpec::Full {
                queries,
                context,
                visible,
                ..
            } => visible[(b * queries + i) * context + j],
        }
    }

    /// Materialise as an explicit `Full` mask.
    pub fn to_full(&self, batch: usize, queries: usize, context: usize) -> MaskSpec {
        let mut visible = Vec::with_capacity(batch * queries * context);
        for b in 0..batch {
            for i in 0..queries {
                for j in 0..context {
                    visible.push(self.visible(b, i, j));
                }
            }
        }
        MaskSpec::Full {
            batch,
            queries,
            context,
            visible,
        }
    }

    /// Check the mask against a `batch x context` token layout with
    /// `queries` query tokens.
    pub fn validate(&self, batch: usize, queries: usize, context: usize) -> Result<()> {
        match self {
            MaskSpec::None => Ok(()),
            MaskSpec::Causal | MaskSpec::BlockCausal(_) => {
                if matches!(self, MaskSpec::BlockCausal(0)) {
                    return Err(Error::Mask("block size must be at least 1".into()));
                }
                if queries != context {
                    return Err(Error::Mask(format!(
                        "causal masks need as many queries as context tokens ({queries} vs {context})"
                    )));
                }
                Ok(())
            }
            MaskSpec::Padding {
                batch: mb,
                context: mn,
                ..
            } => {
                if *mb != batch || *mn != context {
                    return Err(Error::Mask(format!(
                        "padding mask is {mb}x{mn}, tokens are {batch}x{context}"
                    )));
                }
                Ok(())
            }
            MaskSpec::Full {
                batch: mb,
                queries: mq,
                context: mn,
                ..
            } => {
                if *mb != batch || *mq != queries || *mn != context {
                    return Err(Error::Mask(format!(
                        "full mask is {mb}x{mq}x{mn}, expected {batch}x{queries}x{context}"
                    )));
                }
                Ok(())
            }
        }
    }
}
