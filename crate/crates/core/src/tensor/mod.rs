//! Dense `f64` tensors, a define-by-run autodiff graph and a
//! finite-difference gradient checker.

mod dense;
mod gradcheck;
mod graph;
mod param;

pub use dense::Tensor;
pub use gradcheck::{finite_difference_gradcheck, sample_coordinates, Coordinate, GradcheckReport};
pub use graph::{wkv_streaming, Grads, Graph, OpKind, Var};
pub use param::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};

impl Graph {
    /// Non-overlapping 1-D convolution over the rows of `x` `[L×M]` with
    /// kernel = stride = `k_c` and no padding. `weight` is laid out as
    /// `[(k_c·M)×D′]` with window row `j`, channel `m` at row `j·M + m`.
    pub fn conv1d_strided(&self, x: Var, weight: Var, bias: Option<Var>, k_c: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::Shape(format!("conv1d expects [L×M], got {xs:?}")));
        }
        let (len, chans) = (xs[0], xs[1]);
        if k_c == 0 || len % k_c != 0 {
            return Err(Error::Data(format!(
                "conv1d: length {len} is not divisible by kernel {k_c}; supply a history of {} rows",
                k_c * len.div_ceil(k_c.max(1))
            )));
        }
        // Consecutive rows are contiguous, so each window is one row of the reshape.
        let windows = self.reshape(x, &[len / k_c, k_c * chans])?;
        let out = self.matmul(windows, weight)?;
        match bias {
            Some(b) => self.add_row(out, b),
            None => Ok(out),
        }
    }
}
