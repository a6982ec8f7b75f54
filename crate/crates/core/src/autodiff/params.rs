use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Which entries of a block are trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Dense,
    /// Only entries on or below the diagonal.
    LowerTriangular,
}

/// One named parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: DMatrix<f64>,
    pub kind: BlockKind,
}

impl ParamBlock {
    pub fn dense(name: impl Into<String>, value: DMatrix<f64>) -> Self {
        Self {
            name: name.into(),
            value,
            kind: BlockKind::Dense,
        }
    }

    pub fn lower(name: impl Into<String>, value: DMatrix<f64>) -> Self {
        Self {
            name: name.into(),
            value,
            kind: BlockKind::LowerTriangular,
        }
    }

    fn entries(&self) -> Vec<(usize, usize)> {
        let (r, c) = self.value.shape();
        let mut out = Vec::new();
        for j in 0..c {
            for i in 0..r {
                if self.kind == BlockKind::Dense || i >= j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn entry_name(&self, i: usize, j: usize) -> String {
        if self.value.ncols() == 1 {
            format!("{}[{}]", self.name, i)
        } else {
            format!("{}[{},{}]", self.name, i, j)
        }
    }
}

/// Blocks indexed by name.
pub struct BlockMap(HashMap<String, DMatrix<f64>>);

impl BlockMap {
    pub fn new(blocks: Vec<ParamBlock>) -> Self {
        Self(blocks.into_iter().map(|b| (b.name, b.value)).collect())
    }

    pub fn take(&mut self, name: &str, shape: (usize, usize)) -> Result<DMatrix<f64>> {
        let v = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if v.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                v.shape(),
                shape
            )));
        }
        Ok(v)
    }

    pub fn take_scalar(&mut self, name: &str) -> Result<f64> {
        Ok(self.take(name, (1, 1))?[(0, 0)])
    }

    pub fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(k) => Err(Error::Checkpoint(format!("unexpected parameter `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Flat view over every trainable scalar with stable per-entry names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    layout: Vec<(String, (usize, usize), BlockKind)>,
}

impl ParamVector {
    pub fn flatten(blocks: &[ParamBlock]) -> Self {
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(blocks.len());
        for b in blocks {
            for (i, j) in b.entries() {
                names.push(b.entry_name(i, j));
                values.push(b.value[(i, j)]);
            }
            layout.push((b.name.clone(), b.value.shape(), b.kind));
        }
        Self { names, values, layout }
    }

    /// Same layout as `self`, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            names: self.names.clone(),
            values,
            layout: self.layout.clone(),
        }
    }

    /// Rebuilds blocks; entries above the diagonal of triangular blocks are 0.
    pub fn unflatten(&self) -> Vec<ParamBlock> {
        let mut k = 0;
        self.layout
            .iter()
            .map(|(name, (r, c), kind)| {
                let mut value = DMatrix::zeros(*r, *c);
                for j in 0..*c {
                    for i in 0..*r {
                        if *kind == BlockKind::Dense || i >= j {
                            value[(i, j)] = self.values[k];
                            k += 1;
                        }
                    }
                }
                ParamBlock {
                    name: name.clone(),
                    value,
                    kind: *kind,
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            l in prop::collection::vec(-5.0f64..5.0, 9),
        ) {
            let dense = DMatrix::from_vec(3, 2, a);
            let mut lower = DMatrix::from_vec(3, 3, l);
            lower.fill_upper_triangle(0.0, 1);
            let blocks = vec![ParamBlock::dense("a", dense), ParamBlock::lower("l", lower)];
            let pv = ParamVector::flatten(&blocks);
            prop_assert_eq!(pv.len(), 6 + 6);
            prop_assert_eq!(pv.unflatten(), blocks);
        }
    }

    #[test]
    fn entry_names_are_unique() {
        let blocks = vec![
            ParamBlock::dense("layer1.gp2.log_lengthscale", DMatrix::zeros(4, 1)),
            ParamBlock::lower("layer1.gp2.s_chol", DMatrix::zeros(3, 3)),
        ];
        let pv = ParamVector::flatten(&blocks);
        let mut names = pv.names.clone();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), pv.len());
        assert!(pv.index_of("layer1.gp2.log_lengthscale[3]").is_some());
        assert!(pv.index_of("layer1.gp2.s_chol[2,1]").is_some());
        assert!(pv.index_of("layer1.gp2.s_chol[1,2]").is_none());
    }

    #[test]
    fn block_map_rejects_shape_and_leftovers() {
        let mut m = BlockMap::new(vec![ParamBlock::dense("x", DMatrix::zeros(2, 1)), ParamBlock::dense("y", DMatrix::zeros(1, 1))]);
        assert!(m.take("x", (1, 2)).is_err());
        let mut m = BlockMap::new(vec![ParamBlock::dense("y", DMatrix::zeros(1, 1))]);
        assert!(m.take("z", (1, 1)).is_err());
        assert!(m.finish().is_err());
    }
}
