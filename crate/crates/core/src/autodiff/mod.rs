//! Reverse-mode gradients for every model objective, plus a central
//! finite-difference reference used to validate them.

pub mod grad;
pub mod params;
pub mod tape;

use std::collections::HashMap;

pub use grad::{compare, fd_check, finite_difference_gradient, gradient, gradient_spec, FdReport};
pub use params::{BlockKind, BlockMap, ParamBlock, ParamVector};
pub use tape::{logsumexp, Gradients, Mat, Tape, Var};

/// Parameter blocks placed on a tape, addressable by name.
pub struct Bound<'t> {
    vars: HashMap<String, Var<'t>>,
    order: Vec<(String, Var<'t>)>,
}

impl<'t> Bound<'t> {
    /// Places `blocks` as leaves (`trainable`) or constants.
    pub fn new(tape: &'t Tape, blocks: &[ParamBlock], trainable: bool) -> Self {
        let mut vars = HashMap::with_capacity(blocks.len());
        let mut order = Vec::with_capacity(blocks.len());
        for b in blocks {
            let v = if trainable {
                tape.leaf(b.value.clone())
            } else {
                tape.constant(b.value.clone())
            };
            vars.insert(b.name.clone(), v);
            order.push((b.name.clone(), v));
        }
        Self { vars, order }
    }

    /// Panics on an unknown name: binding code and block listing must agree.
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    /// Adjoints laid out like `ParamVector::flatten(blocks)`.
    pub fn collect(&self, grads: &Gradients, blocks: &[ParamBlock]) -> ParamVector {
        let gblocks: Vec<ParamBlock> = blocks
            .iter()
            .zip(&self.order)
            .map(|(b, (name, v))| {
                debug_assert_eq!(&b.name, name);
                ParamBlock {
                    name: b.name.clone(),
                    value: grads.wrt(*v),
                    kind: b.kind,
                }
            })
            .collect();
        ParamVector::flatten(&gblocks)
    }
}
