//! Named parameter traversal.
//!
//! Layers are plain structs of tensors. [`Module`] walks them in a fixed
//! order and yields dotted names (`backbone.1.conv.weight`), which is all the
//! optimizer, the freeze mask and the checkpoint container need.

use crate::tensor::{RunningStats, Tensor};

#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// False for statistics buffers, which the optimizer never touches.
    pub trainable: bool,
}

#[derive(Debug)]
pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub trainable: bool,
}

pub trait Module {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>);

    fn param_list(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    fn param_list_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    /// Same structure with every value set to zero; used as a gradient holder.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for p in z.param_list_mut() {
            p.data.fill(0.0);
        }
        z
    }

    /// `self += other` over trainable entries.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.param_list();
        for (dst, src) in self.param_list_mut().into_iter().zip(src) {
            if dst.trainable {
                for (d, s) in dst.data.iter_mut().zip(src.data) {
                    *d += s;
                }
            }
        }
    }

    fn scale_all(&mut self, factor: f64)
    where
        Self: Sized,
    {
        for p in self.param_list_mut() {
            for v in p.data.iter_mut() {
                *v *= factor;
            }
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Tensor {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(ParamView {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.data(),
            trainable: true,
        });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        let shape = self.shape().to_vec();
        out.push(ParamViewMut {
            name: prefix.to_string(),
            shape,
            data: self.data_mut(),
            trainable: true,
        });
    }
}

impl Module for RunningStats {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (field, data) in [("running_mean", &self.mean), ("running_var", &self.var)] {
            out.push(ParamView {
                name: join(prefix, field),
                shape: vec![data.len()],
                data,
                trainable: false,
            });
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        let RunningStats { mean, var } = self;
        for (field, data) in [("running_mean", mean), ("running_var", var)] {
            out.push(ParamViewMut {
                name: join(prefix, field),
                shape: vec![data.len()],
                data,
                trainable: false,
            });
        }
    }
}

impl<T: Module> Module for Option<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        if let Some(m) = self {
            m.params(prefix, out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        if let Some(m) = self {
            m.params_mut(prefix, out);
        }
    }
}

/// Vectors are named by zero-based index.
impl<T: Module> Module for Vec<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (i, m) in self.iter().enumerate() {
            m.params(&join(prefix, &i.to_string()), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Pyramid-level maps are named `p<level>`.
impl<T: Module> Module for std::collections::BTreeMap<u32, T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (level, m) in self {
            m.params(&join(prefix, &format!("p{level}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        for (level, m) in self.iter_mut() {
            m.params_mut(&join(prefix, &format!("p{level}")), out);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Module for $ty {
            fn params<'a>(&'a self, prefix: &str, out: &mut Vec<$crate::params::ParamView<'a>>) {
                $( $crate::params::Module::params(&self.$field, &$crate::params::join(prefix, stringify!($field)), out); )*
            }
            fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<$crate::params::ParamViewMut<'a>>) {
                $( $crate::params::Module::params_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
