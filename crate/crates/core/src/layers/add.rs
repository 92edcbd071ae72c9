use super::Session;
use crate::error::Result;
use crate::tape::{Backward, BackwardCtx};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAdd {
    pub id: String,
}

impl ResidualAdd {
    pub fn new(id: impl Into<String>) -> Self {
        ResidualAdd { id: id.into() }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        residual_add(s, &self.id, a, b)
    }
}

/// Skip connection `a + b`; saves nothing and routes the gradient to both.
pub fn residual_add<T: Scalar>(s: &mut Session<'_, T>, layer: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let y = a.zip_map(b, |x, y| x + y)?;
    if s.requires_grad(a) || s.requires_grad(b) {
        s.tape
            .record(layer, "add", &[a.id(), b.id()], &y, Vec::new(), Box::new(AddBack));
    }
    Ok(y)
}

struct AddBack;

impl<T: Scalar> Backward<T> for AddBack {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(ctx
            .input_needs_grad
            .iter()
            .map(|&n| n.then(|| ctx.grad_out.clone()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{grads_of, run};
    use crate::layers::Phase;
    use crate::params::ParamStore;

    #[test]
    fn gradient_reaches_both_inputs() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0f64, -1.0]).unwrap();
        let mut p = ParamStore::new();
        let (y, mut tape) = run(&mut p, Phase::Train, &[&a, &b], |s| residual_add(s, "add", &a, &b));
        assert_eq!(y.data(), &[4.0, 1.0]);
        assert_eq!(tape.saved_bytes(), 0);
        let r = Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        let g = grads_of(&mut p, &mut tape, &y, &r);
        assert_eq!(g.input(a.id()).unwrap().data(), r.data());
        assert_eq!(g.input(b.id()).unwrap().data(), r.data());
    }
}
