//! Named parameter records and their binding onto a [`Tape`].

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Declares a parameter record generic over its storage (`Tensor` at rest,
/// `Var` once bound to a tape), with field-name reflection.
macro_rules! param_struct {
    ($(#[$m:meta])* $vis:vis struct $name:ident { $($(#[$fm:meta])* $field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name<P = $crate::tensor::Tensor> {
            $($(#[$fm])* pub $field: P,)*
        }

        impl<P> $name<P> {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn try_map<Q, E>(
                &self,
                mut f: impl FnMut(&'static str, &P) -> std::result::Result<Q, E>,
            ) -> std::result::Result<$name<Q>, E> {
                Ok($name { $($field: f(stringify!($field), &self.$field)?,)* })
            }

            pub fn for_each(&self, mut f: impl FnMut(&'static str, &P)) {
                $(f(stringify!($field), &self.$field);)*
            }

            pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut P)) {
                $(f(stringify!($field), &mut self.$field);)*
            }
        }

        impl $name<$crate::tensor::Tensor> {
            /// Binds every field onto the binder's tape under `prefix.field`.
            pub fn bind<'t>(
                &self,
                binder: &$crate::params::Binder<'t>,
                prefix: &str,
            ) -> $name<$crate::autodiff::Var<'t>> {
                self.try_map(|n, t| {
                    Ok::<_, std::convert::Infallible>(binder.bind(&format!("{prefix}.{n}"), t))
                })
                .unwrap_or_else(|e| match e {})
            }

            /// Binds every field as a differentiable leaf of `tape`.
            pub fn on_tape<'t>(&self, tape: &'t $crate::autodiff::Tape) -> $name<$crate::autodiff::Var<'t>> {
                self.try_map(|_, t| Ok::<_, std::convert::Infallible>(tape.param(t.clone())))
                    .unwrap_or_else(|e| match e {})
            }

            pub fn collect_named(&self, prefix: &str, out: &mut Vec<(String, $crate::tensor::Tensor)>) {
                self.for_each(|n, t| out.push((format!("{prefix}.{n}"), t.clone())));
            }

            pub fn store_into(&self, store: &mut $crate::params::ParamStore, prefix: &str) {
                self.for_each(|n, t| store.insert(format!("{prefix}.{n}"), t.clone()));
            }

            pub fn from_store(store: &$crate::params::ParamStore, prefix: &str) -> $crate::error::Result<Self> {
                let fields = Self::FIELDS.iter()
                    .map(|n| store.get(&format!("{prefix}.{n}")).cloned())
                    .collect::<$crate::error::Result<Vec<_>>>()?;
                let mut it = fields.into_iter();
                Ok($name { $($field: it.next().expect(stringify!($field)),)* })
            }

            /// Looks up `prefix.*` in `store` and binds it through `binder`.
            pub fn bind_store<'t>(
                store: &$crate::params::ParamStore,
                binder: &$crate::params::Binder<'t>,
                prefix: &str,
            ) -> $crate::error::Result<$name<$crate::autodiff::Var<'t>>> {
                Ok(Self::from_store(store, prefix)?.bind(binder, prefix))
            }
        }
    };
}
pub(crate) use param_struct;

/// All parameters of a model, keyed by dotted name in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::schema(name, "missing parameter"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::schema(name, "missing parameter"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.map.iter().map(|(n, t)| (n.clone(), t.clone())).collect()
    }

    /// Copies every tensor under `from.` to `to.`.
    pub fn copy_prefix(&mut self, source: &ParamStore, from: &str, to: &str) -> Result<()> {
        let head = format!("{from}.");
        let mut found = false;
        for (n, t) in source.iter() {
            if let Some(rest) = n.strip_prefix(&head) {
                let dest = format!("{to}.{rest}");
                let slot = self.get_mut(&dest)?;
                expect_shape(&dest, t, slot.shape())?;
                *slot = t.clone();
                found = true;
            }
        }
        if !found {
            return Err(Error::schema(from, "no parameters under this prefix"));
        }
        Ok(())
    }

    /// Replaces every tensor from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (n, t) in self.map.iter_mut() {
            let src = other.get(n)?;
            expect_shape(n, src, t.shape())?;
            *t = src.clone();
        }
        if let Some(extra) = other.names().find(|n| !self.map.contains_key(*n)) {
            return Err(Error::schema(extra.as_str(), "unexpected parameter"));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str, model: serde_json::Value) -> Result<()> {
        crate::tnsf::write_named(dir, stem, &self.to_named(), model)?;
        Ok(())
    }

    /// Reads a collection and returns it with the manifest's model description.
    pub fn load(dir: &Path, stem: &str) -> Result<(Self, serde_json::Value)> {
        let (manifest, named) = crate::tnsf::read_named(dir, stem)?;
        let mut store = Self::new();
        for (n, t) in named {
            if store.contains(&n) {
                return Err(Error::schema(n, "duplicate tensor name"));
            }
            store.insert(n, t);
        }
        Ok((store, manifest.model))
    }
}

/// Binds parameter tensors onto a tape, remembering which leaf belongs to
/// which name. Parameters outside the trainable set become constants.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: Box<dyn Fn(&str) -> bool + 't>,
    bound: RefCell<Vec<(String, Var<'t>)>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, trainable: impl Fn(&str) -> bool + 't) -> Self {
        Self {
            tape,
            trainable: Box::new(trainable),
            bound: RefCell::new(Vec::new()),
        }
    }

    /// A binder for inference: nothing is differentiable.
    pub fn frozen(tape: &'t Tape) -> Self {
        Self::new(tape, |_| false)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&self, name: &str, value: &Tensor) -> Var<'t> {
        let grad = (self.trainable)(name);
        let var = self.tape.leaf(value.clone(), grad);
        if grad {
            self.bound.borrow_mut().push((name.to_string(), var.clone()));
        }
        var
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients of the trainable parameters, by name. A name bound more
    /// than once has its gradients summed.
    pub fn named_grads(&self, grads: &Gradients) -> HashMap<String, Tensor> {
        let mut out: HashMap<String, Tensor> = HashMap::new();
        for (name, var) in self.bound.borrow().iter() {
            let g = grads.get(var);
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

/// Deterministic RNG for initializing the layer called `name`.
pub fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}:{name}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

/// Uniform in `±sqrt(1/fan_in)` with a per-layer seed.
pub fn init_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, &mut layer_rng(seed, name))
}

/// Uniform in `±sqrt(6/fan_in)`, for kernels followed by a ReLU.
pub fn init_relu_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, &mut layer_rng(seed, name))
}

pub(crate) fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(
            "params",
            format!("{name}: expected {shape:?}, found {:?}", t.shape()),
        ));
    }
    Ok(())
}
