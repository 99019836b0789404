use std::cell::RefCell;

use indexmap::IndexMap;

use crate::error::Result;
use crate::tensor::nn::{self, BatchStats, NormMode};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward evaluation over a parameter store.
///
/// Parameters are materialized lazily as leaf tensors; those selected by the
/// `tracked` predicate receive gradients. In train mode, batch-norm layers
/// whose affine parameters are all untracked fall back to running statistics
/// so that frozen blocks stay bit-identical.
pub struct Forward<'a> {
    store: &'a ParamStore,
    mode: Mode,
    tracked: Box<dyn Fn(&str) -> bool + 'a>,
    leaves: RefCell<IndexMap<String, Tensor>>,
    bn_updates: RefCell<Vec<(String, BatchStats)>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, tracked: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            store,
            mode,
            tracked: Box::new(tracked),
            leaves: RefCell::new(IndexMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Inference: eval mode, nothing tracked.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval, |_| false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let value = self.store.expect(name)?;
        let t = value.tensor((self.tracked)(name));
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Leaf tensors created so far, for gradient lookup.
    pub fn leaves(&self) -> IndexMap<String, Tensor> {
        self.leaves.borrow().clone()
    }

    /// Batch statistics produced by train-mode batch-norm layers, keyed by
    /// layer prefix.
    pub fn take_bn_updates(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    pub(crate) fn batch_norm(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let gamma_name = format!("{prefix}.gamma");
        let beta_name = format!("{prefix}.beta");
        let gamma = self.param(&gamma_name)?;
        let beta = self.param(&beta_name)?;
        let batch_mode = self.mode == Mode::Train && ((self.tracked)(&gamma_name) || (self.tracked)(&beta_name));
        if batch_mode {
            let (y, stats) = nn::batch_norm2d(x, &gamma, &beta, NormMode::Train)?;
            if let Some(stats) = stats {
                self.bn_updates.borrow_mut().push((prefix.to_string(), stats));
            }
            Ok(y)
        } else {
            let mean = self.store.expect(&format!("{prefix}.running_mean"))?;
            let var = self.store.expect(&format!("{prefix}.running_var"))?;
            let (y, _) = nn::batch_norm2d(
                x,
                &gamma,
                &beta,
                NormMode::Eval {
                    running_mean: &mean.data,
                    running_var: &var.data,
                },
            )?;
            Ok(y)
        }
    }
}
