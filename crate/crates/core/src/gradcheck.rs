//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::model::TransformerLm;
use crate::tensor::{Tape, Tensor, Var};

/// Worst-case agreement between analytic and numerical gradients for one
/// input tensor.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// max over elements of `|analytic - fd| / max(|fd|, 1e-8)`
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// `‖analytic - fd‖₂ / max(‖fd‖₂, 1e-8)` over the whole tensor
    pub norm_rel_err: f64,
    /// Elements whose own relative error exceeds `1e-4`.
    pub elements_over_1e4: usize,
}

#[derive(Default)]
struct Acc {
    max_rel: f64,
    max_abs: f64,
    worst: usize,
    checked: usize,
    diff_sq: f64,
    fd_sq: f64,
    over: usize,
}

impl Acc {
    fn push(&mut self, j: usize, analytic: f64, fd: f64) {
        let abs = (analytic - fd).abs();
        let rel = abs / fd.abs().max(1e-8);
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = j;
        }
        if rel > 1e-4 {
            self.over += 1;
        }
        self.max_abs = self.max_abs.max(abs);
        self.diff_sq += abs * abs;
        self.fd_sq += fd * fd;
        self.checked += 1;
    }

    fn report(self) -> GradReport {
        GradReport {
            max_rel_err: self.max_rel,
            max_abs_err: self.max_abs,
            worst_index: self.worst,
            checked: self.checked,
            norm_rel_err: self.diff_sq.sqrt() / self.fd_sq.sqrt().max(1e-8),
            elements_over_1e4: self.over,
        }
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h` for every element of every input.
///
/// `f` receives the tape and one [`Var`] per input and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("variables carry gradients").to_vec())
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x)).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out)[0])
    };

    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut acc = Acc::default();
        for (j, &analytic) in grad.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            acc.push(j, analytic, fd);
        }
        reports.push(acc.report());
    }
    Ok(reports)
}

/// Finite-difference check of every parameter of a language model against
/// the tape gradient of its mean cross-entropy. One report per named
/// parameter, in [`TransformerLm::named_params`] order.
pub fn check_model_gradients(
    model: &TransformerLm<f64>,
    inputs: &[usize],
    targets: &[usize],
    seq_len: usize,
    h: f64,
) -> Result<Vec<(String, GradReport)>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = model.loss(&mut tape, &vars, inputs, targets, seq_len)?;
    tape.backward(loss)?;

    let eval = |m: &TransformerLm<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let mut frozen = m.clone();
        frozen.set_requires_grad(false);
        let vs = frozen.bind(&mut t);
        let l = frozen.loss(&mut t, &vs, inputs, targets, seq_len)?;
        Ok(t.value(l)[0])
    };

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut work = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (p, (name, &v)) in names.iter().zip(&vars.order).enumerate() {
        let grad = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default();
        let mut acc = Acc::default();
        let n = model.named_params()[p].1.numel();
        for j in 0..n {
            let orig = work.named_params()[p].1.data()[j];
            work.named_params_mut()[p].1.data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.named_params_mut()[p].1.data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.named_params_mut()[p].1.data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            acc.push(j, grad.get(j).copied().unwrap_or(0.0), fd);
        }
        out.push((name.clone(), acc.report()));
    }
    Ok(out)
}
