//! Named parameter trees.
//!
//! Every learnable component implements [`Parameters`], which enumerates its
//! tensors in a fixed order under dotted names (`encoder.seq.layers.0.b_proj.weight`).
//! Gradients are stored in a value of the same type, so optimizers, the
//! momentum update and checkpointing all reduce to zipping two enumerations.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};

pub type NamedView<'a> = (String, ArrayViewD<'a, f64>);
pub type NamedViewMut<'a> = (String, ArrayViewMutD<'a, f64>);

pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>);

    fn tensors(&self) -> Vec<NamedView<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<NamedViewMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// A copy with every entry set to zero; used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_parameters());
        for (_, t) in self.tensors() {
            v.extend(t.iter().copied());
        }
        v
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_parameters();
        if values.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "flat vector has {} entries, parameter tree has {n}",
                values.len()
            )));
        }
        let mut offset = 0;
        for (_, mut t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = values[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for Array1<f64> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((prefix.to_string(), self.view().into_dyn()));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((prefix.to_string(), self.view_mut().into_dyn()));
    }
}

impl Parameters for Array2<f64> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((prefix.to_string(), self.view().into_dyn()));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((prefix.to_string(), self.view_mut().into_dyn()));
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        if let Some(t) = self {
            t.collect(prefix, out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        if let Some(t) = self {
            t.collect_mut(prefix, out);
        }
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        for (i, t) in self.iter().enumerate() {
            t.collect(&join(prefix, &i.to_string()), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Parameters> Parameters for BTreeMap<String, T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        for (k, t) in self {
            t.collect(&join(prefix, k), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        for (k, t) in self.iter_mut() {
            t.collect_mut(&join(prefix, k), out);
        }
    }
}

/// Implements [`Parameters`] for a struct by delegating to the listed fields,
/// in order.
#[macro_export]
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::params::Parameters for $ty {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<$crate::params::NamedView<'a>>) {
                $( $crate::params::Parameters::collect(&self.$field, &$crate::params::join_name(prefix, stringify!($field)), out); )+
            }
            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<$crate::params::NamedViewMut<'a>>) {
                $( $crate::params::Parameters::collect_mut(&mut self.$field, &$crate::params::join_name(prefix, stringify!($field)), out); )+
            }
        }
    };
}

#[doc(hidden)]
pub fn join_name(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

/// Calls `f(target, source)` for each pair of same-named tensors.
///
/// Every tensor of `target` must exist in `source` with the same shape;
/// `source` may carry extra tensors (e.g. a query-only prediction head).
pub fn zip_by_name<T, S>(
    target: &mut T,
    source: &S,
    mut f: impl FnMut(ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
) -> Result<()>
where
    T: Parameters + ?Sized,
    S: Parameters + ?Sized,
{
    let src: BTreeMap<String, ArrayViewD<'_, f64>> = source.tensors().into_iter().collect();
    for (name, t) in target.tensors_mut() {
        let s = src
            .get(&name)
            .ok_or_else(|| Error::DimensionMismatch(format!("tensor `{name}` missing from source")))?;
        if s.shape() != t.shape() {
            return Err(Error::DimensionMismatch(format!(
                "tensor `{name}`: shape {:?} vs {:?}",
                t.shape(),
                s.shape()
            )));
        }
        f(t, s.view());
    }
    Ok(())
}

/// Adds `other` into `acc` tensor-by-tensor (both trees share structure).
pub fn accumulate<T: Parameters + ?Sized>(acc: &mut T, other: &T) {
    let src = other.tensors();
    for ((_, mut a), (_, b)) in acc.tensors_mut().into_iter().zip(src) {
        a += &b;
    }
}

pub fn scale<T: Parameters + ?Sized>(acc: &mut T, factor: f64) {
    for (_, mut t) in acc.tensors_mut() {
        t.mapv_inplace(|x| x * factor);
    }
}
