use super::{DiffError, Gradients, Graph, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub value: Tensor,
}

/// Flat, ordered collection of named parameters tagged with a group
/// (encoder, quantizer, decoder, ...). Order is creation order and is stable
/// across save/load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group: group.to_string(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of scalar parameters in `group`.
    pub fn count_in_group(&self, group: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    /// Replace every value with the one stored under the same name in
    /// `other`. Shapes must match.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| DiffError::shape("load_values", format!("missing parameter {}", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(DiffError::shape(
                    "load_values",
                    format!("{}: {:?} vs {:?}", e.name, src.value.shape(), e.value.shape()),
                ));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }
}

/// A graph bound to a read-only parameter store. Parameters are placed on
/// the tape lazily; only those marked trainable record gradients.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
}

impl<'s> Session<'s> {
    /// Session in which no parameter records gradients (inference).
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::with_trainable(store, vec![false; store.len()])
    }

    /// Session in which parameters whose group is in `groups` are trainable.
    pub fn training(store: &'s ParamStore, groups: &[&str]) -> Self {
        let trainable = store
            .entries
            .iter()
            .map(|e| groups.contains(&e.group.as_str()))
            .collect();
        Self::with_trainable(store, trainable)
    }

    pub fn with_trainable(store: &'s ParamStore, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Backward from `loss`, returning one gradient slot per parameter in
    /// store order. Unbound or frozen parameters get `None`.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor>>, DiffError> {
        let mut grads = self.graph.backward(loss)?;
        Ok(self.take_param_grads(&mut grads))
    }

    pub fn take_param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}
