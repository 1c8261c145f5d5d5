use crate::attention::BaseKernelBank;
use crate::tensor::Scalar;

/// Pearson correlation; `None` when either input has zero variance up to rounding.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let flat = |ss: f64, v: &[f64]| {
        let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        ss <= 1e-24 * n * peak * peak
    };
    (!flat(saa, a) && !flat(sbb, b)).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelCorrelation {
    /// Per head, a `b×b` matrix of base-kernel correlations.
    pub pairwise: Vec<Vec<Vec<f64>>>,
    /// Per head, each base kernel's correlation with the position encoding.
    pub with_pos: Vec<Vec<f64>>,
    /// Set when any pair involved a zero-variance kernel; such entries are 0.
    pub degenerate: bool,
}

impl KernelCorrelation {
    /// Mean of the off-diagonal pairwise entries over all heads.
    pub fn mean_pairwise(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .pairwise
            .iter()
            .flat_map(|m| m.iter().enumerate().flat_map(move |(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, v)| *v)))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_with_pos(&self) -> Option<f64> {
        let vals: Vec<f64> = self.with_pos.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn kernel_correlation<T: Scalar>(bank: &BaseKernelBank<T>) -> KernelCorrelation {
    let mut degenerate = false;
    let mut corr = |a: &[f64], b: &[f64]| match pearson(a, b) {
        Some(c) => c,
        None => {
            degenerate = true;
            0.0
        }
    };
    let to64 = |k: &[T]| k.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let mut pairwise = Vec::with_capacity(bank.heads());
    let mut with_pos = Vec::with_capacity(bank.heads());
    for h in 0..bank.heads() {
        let kernels: Vec<Vec<f64>> = (0..bank.bases()).map(|i| to64(bank.kernel(h, i))).collect();
        let m: Vec<Vec<f64>> = kernels.iter().map(|a| kernels.iter().map(|b| corr(a, b)).collect()).collect();
        pairwise.push(m);
        if bank.pos_enabled() {
            let p = to64(bank.pos_kernel(h));
            with_pos.push(kernels.iter().map(|k| corr(k, &p)).collect());
        }
    }
    KernelCorrelation { pairwise, with_pos, degenerate }
}
