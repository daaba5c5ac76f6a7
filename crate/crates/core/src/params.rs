//! Named-tensor traversal shared by the optimizer, checkpoints and the
//! gradient checker.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// A tree of learnable tensors addressable by dotted names. Gradients use the
/// same type as the parameters they belong to.
pub trait ParamSet<T: Scalar> {
    fn params(&self) -> Vec<(String, &Matrix<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)>;

    fn zero(&mut self) {
        for (_, m) in self.params_mut() {
            m.fill(T::zero());
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut g = self.clone();
        g.zero();
        g
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    fn axpy(&mut self, alpha: T, other: &Self) {
        let src = other.params();
        for ((n, dst), (m, s)) in self.params_mut().into_iter().zip(src) {
            debug_assert_eq!(n, m);
            dst.axpy(alpha, s);
        }
    }

    fn sum_sq(&self) -> T {
        self.params().iter().map(|(_, m)| m.sum_sq()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, m)| m.all_finite())
    }

    fn scale(&mut self, s: T) {
        for (_, m) in self.params_mut() {
            m.scale(s);
        }
    }
}

/// Prepends `prefix.` to every name.
pub fn prefixed<'a, M>(prefix: &str, items: Vec<(String, M)>) -> impl Iterator<Item = (String, M)> + 'a
where
    M: 'a,
{
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, m)| (format!("{prefix}.{n}"), m))
}

/// A flat list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors<T>(pub Vec<(String, Matrix<T>)>);

impl<T: Scalar> NamedTensors<T> {
    /// Zero tensors shaped like every tensor of `p`.
    pub fn zeros_for<P: ParamSet<T>>(p: &P) -> Self {
        Self(
            p.params()
                .into_iter()
                .map(|(n, m)| (n, m.zeros_like()))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

impl<T: Scalar> ParamSet<T> for NamedTensors<T> {
    fn params(&self) -> Vec<(String, &Matrix<T>)> {
        self.0.iter().map(|(n, m)| (n.clone(), m)).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        self.0.iter_mut().map(|(n, m)| (n.clone(), m)).collect()
    }
}

/// Weight decay applies to weight matrices only, not to biases or
/// layer-norm parameters.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.ends_with("bias") || leaf.starts_with("ln") || name.contains(".ln"))
}
