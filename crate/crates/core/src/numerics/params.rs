use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, Result, Tape, Tensor, Var};

/// One named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameters packed into one flat buffer, in registration order.
///
/// The flat layout is what the optimizer and the checkpoint format operate on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<usize> {
        let name = name.into();
        let product: usize = shape.iter().product();
        if product != values.len() || shape.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                product,
                len: values.len(),
            });
        }
        if self.index_of(&name).is_some() {
            return Err(NumericsError::InvalidArgument {
                op: "param_store",
                reason: format!("duplicate parameter {name}"),
            });
        }
        self.entries.push(ParamEntry {
            name,
            shape,
            offset: self.data.len(),
        });
        self.data.extend(values);
        Ok(self.entries.len() - 1)
    }

    pub fn from_parts(entries: Vec<ParamEntry>, data: Vec<f64>) -> Result<Self> {
        let mut store = Self::new();
        let mut off = 0;
        for e in entries {
            let n = e.numel();
            if off + n > data.len() {
                return Err(NumericsError::LengthMismatch {
                    what: "param payload",
                    got: data.len(),
                    expected: off + n,
                });
            }
            store.push(e.name, e.shape, data[off..off + n].to_vec())?;
            off += n;
        }
        if off != data.len() {
            return Err(NumericsError::LengthMismatch {
                what: "param payload",
                got: data.len(),
                expected: off,
            });
        }
        Ok(store)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, index: usize) -> &[f64] {
        let e = &self.entries[index];
        &self.data[e.offset..e.offset + e.numel()]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut [f64] {
        let e = &self.entries[index];
        let (lo, hi) = (e.offset, e.offset + e.numel());
        &mut self.data[lo..hi]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        Tensor::new(self.entries[index].shape.clone(), self.get(index).to_vec())
            .expect("param store keeps shapes consistent")
    }

    /// Records every parameter as a grad-enabled leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        (0..self.entries.len())
            .map(|i| tape.leaf(self.tensor(i).requires_grad()))
            .collect()
    }

    /// Gathers the gradients of bound leaves into the store's flat layout.
    pub fn flat_grad(&self, grads: &Gradients, vars: &[Var]) -> Result<Vec<f64>> {
        if vars.len() != self.entries.len() {
            return Err(NumericsError::LengthMismatch {
                what: "bound vars",
                got: vars.len(),
                expected: self.entries.len(),
            });
        }
        let mut out = Vec::with_capacity(self.data.len());
        for (e, v) in self.entries.iter().zip(vars) {
            match grads.get(*v) {
                Some(g) if g.len() == e.numel() => out.extend_from_slice(g),
                Some(g) => {
                    return Err(NumericsError::LengthMismatch {
                        what: "param gradient",
                        got: g.len(),
                        expected: e.numel(),
                    })
                }
                None => return Err(NumericsError::UnknownVar(v.id())),
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
