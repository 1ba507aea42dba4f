//! Named parameter collections.

/// One named tensor. Buffers (`trainable == false`) hold running statistics
/// and are skipped by optimizers and EMA updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An ordered collection of parameters addressed by insertion index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>, trainable: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name,
            shape,
            data,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn get(&self, idx: usize) -> &[f32] {
        &self.params[idx].data
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut [f32] {
        &mut self.params[idx].data
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(Param::numel)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    /// True when both sets list identical names, shapes and kinds in order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.trainable == b.trainable)
    }
}

/// How a declared tensor is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    /// Uniform on `[-bound, bound]`.
    Uniform { bound: f32 },
    Const(f32),
}

/// Receives tensor declarations while a network topology is built. The
/// returned index addresses the tensor in the collection being built.
pub trait Declare {
    fn declare(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> usize;
}

/// Allocates and initializes declared tensors from a random stream.
pub struct Initializer<'a, R: rand::Rng> {
    pub params: ParamSet,
    pub rng: &'a mut R,
}

impl<R: rand::Rng> Declare for Initializer<'_, R> {
    fn declare(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> usize {
        use rand_distr::{Distribution, StandardNormal, Uniform};
        let n: usize = shape.iter().product();
        let data = match init {
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in as f32).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(self.rng);
                        z * std
                    })
                    .collect()
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::Const(v) => vec![v; n],
        };
        self.params.push(name, shape, data, trainable)
    }
}

/// Records names and shapes only; used to rebuild topology for existing
/// parameters and to validate loaded collections.
#[derive(Debug, Default)]
pub struct Layout {
    pub entries: Vec<(String, Vec<usize>, bool)>,
}

impl Declare for Layout {
    fn declare(&mut self, name: String, shape: Vec<usize>, _init: Init, trainable: bool) -> usize {
        self.entries.push((name, shape, trainable));
        self.entries.len() - 1
    }
}

impl Layout {
    pub fn matches(&self, ps: &ParamSet) -> bool {
        self.entries.len() == ps.len()
            && self
                .entries
                .iter()
                .zip(ps.iter())
                .all(|((n, s, t), p)| *n == p.name && *s == p.shape && *t == p.trainable)
    }

    /// Describes the first disagreement with `ps`, if any.
    pub fn mismatch(&self, ps: &ParamSet) -> Option<String> {
        if self.entries.len() != ps.len() {
            return Some(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                ps.len()
            ));
        }
        self.entries
            .iter()
            .zip(ps.iter())
            .find(|((n, s, t), p)| *n != p.name || *s != p.shape || *t != p.trainable)
            .map(|((n, s, _), p)| {
                format!("expected {n} {s:?}, found {} {:?}", p.name, p.shape)
            })
    }
}
