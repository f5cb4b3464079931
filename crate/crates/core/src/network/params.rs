use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

/// Named access to every learnable tensor of a model, in a fixed order.
///
/// The same type doubles as its own gradient container: gradients are
/// accumulated into a zero-filled clone of the parameters.
pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>);

    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for (_, mut t) in self.named_tensors_mut() {
            t.fill(value);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn to_owned_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_owned()))
            .collect()
    }

    fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn squared_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.named_tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
