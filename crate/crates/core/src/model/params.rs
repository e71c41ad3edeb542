use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Top-level parameter groups, keyed by the first component of a name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Compressor,
    Projector,
    Llm,
    Embq,
    Queries,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Compressor,
        ParamGroup::Projector,
        ParamGroup::Llm,
        ParamGroup::Embq,
        ParamGroup::Queries,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Compressor => "compressor",
            ParamGroup::Projector => "proj",
            ParamGroup::Llm => "llm",
            ParamGroup::Embq => "embq",
            ParamGroup::Queries => "queries",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Seed for the tensor called `name`: FNV-1a of the name, mixed with `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub(crate) fn layer_name(layer: usize, suffix: &str) -> String {
    format!("llm.L{layer:02}.{suffix}")
}

pub(crate) fn embq_name(insert_at: usize, block: usize, suffix: &str) -> String {
    format!("embq.L{insert_at:02}.B{block}.{suffix}")
}

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(move |(n, _)| ParamGroup::of(n) == Some(group))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor as a leaf; `trainable(name)` decides which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone().with_requires_grad(trainable(name)));
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Records only the tensors selected by `include`, as constants.
    pub fn bind_where(&self, tape: &mut Tape, include: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .filter(|(name, _)| include(name))
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_name_prefixes() {
        assert_eq!(
            ParamGroup::of("compressor.w1"),
            Some(ParamGroup::Compressor)
        );
        assert_eq!(ParamGroup::of("proj.w"), Some(ParamGroup::Projector));
        assert_eq!(
            ParamGroup::of(&layer_name(3, "attn.wq")),
            Some(ParamGroup::Llm)
        );
        assert_eq!(
            ParamGroup::of(&embq_name(8, 0, "up_proj")),
            Some(ParamGroup::Embq)
        );
        assert_eq!(ParamGroup::of("queries"), Some(ParamGroup::Queries));
        assert_eq!(ParamGroup::of("other"), None);
    }

    #[test]
    fn derived_seeds_differ_by_name_and_seed() {
        assert_ne!(derive_seed(0, "a"), derive_seed(0, "b"));
        assert_ne!(derive_seed(0, "a"), derive_seed(1, "a"));
        assert_eq!(derive_seed(5, "llm.embed"), derive_seed(5, "llm.embed"));
    }

    #[test]
    fn bind_respects_trainable_predicate() {
        let mut store = ParamStore::new();
        store.insert("proj.w", Tensor::zeros(&[2, 2]));
        store.insert("llm.embed", Tensor::zeros(&[3, 2]));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |n| n.starts_with("proj"));
        let p = bound.get("proj.w").unwrap();
        let e = bound.get("llm.embed").unwrap();
        assert!(tape.value(p).requires_grad);
        assert!(!tape.value(e).requires_grad);
        assert!(bound.get("nope").is_err());
    }
}
