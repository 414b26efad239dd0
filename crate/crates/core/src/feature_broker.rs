//! Hierarchical feature broker.
//!
//! Producers obtain an [`InputPipe`] per feature and publish values into it
//! from any thread. Models are associated with a node together with the
//! feature keys they read; consumers bind an [`OutputPipe`] and poll it for
//! predictions. Every evaluation runs on one [`FeatureSnapshot`] taken under
//! the value lock, so batch publishes are never observed half applied.
//!
//! Nodes form a tree. [`BrokerNode::fork`] creates a child that resolves
//! features against its own inputs first and then its ancestors, so shared
//! state (platform, network type) lives on the root while each sub-component
//! binds local features on its own fork.
//!
//! Topology changes (bind, associate, fork) are serialised internally, but
//! callers should not race them against each other on the same node: the
//! resulting resolution depends on which bind lands first.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use thiserror::Error;

use crate::feature::{FeatureError, FeatureKey, FeatureValue, ValueKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BrokerError {
    #[error("feature {0} is already bound on this node")]
    DuplicateBinding(FeatureKey),
    #[error("invalid feature key: {0}")]
    InvalidKey(String),
    #[error("feature {key} expects {expected} values, got {got}")]
    KindMismatch {
        key: FeatureKey,
        expected: ValueKind,
        got: ValueKind,
    },
    #[error("non-finite value published to {0}")]
    NonFiniteValue(FeatureKey),
    #[error("pipe for {0} appears twice in one batch")]
    DuplicatePipeInBatch(FeatureKey),
    #[error("pipe for {0} belongs to a different broker")]
    ForeignPipe(FeatureKey),
    #[error("output {0:?} is already associated on this node")]
    DuplicateOutputName(String),
    #[error("model expects {expected} inputs, association has {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("no output named {0:?} is visible from this node")]
    UnknownOutput(String),
}

impl From<FeatureError> for BrokerError {
    fn from(e: FeatureError) -> Self {
        BrokerError::InvalidKey(e.to_string())
    }
}

/// Broker-global commit counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Epoch(pub u64);

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity of a model association, used to swap the model later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelHandle(usize);

/// A scheme for turning the declared inputs into an output.
///
/// `evaluate` receives the features in the order they were declared to
/// [`BrokerNode::associate_model`].
pub trait Model<O>: Send + Sync {
    fn arity(&self) -> usize;
    fn evaluate(&self, features: &[(FeatureKey, FeatureValue)]) -> O;
}

/// Adapter turning a closure into a [`Model`].
pub struct FnModel<F> {
    arity: usize,
    f: F,
}

impl<F> FnModel<F> {
    pub fn new(arity: usize, f: F) -> Self {
        Self { arity, f }
    }
}

impl<O, F> Model<O> for FnModel<F>
where
    F: Fn(&[(FeatureKey, FeatureValue)]) -> O + Send + Sync,
{
    fn arity(&self) -> usize {
        self.arity
    }

    fn evaluate(&self, features: &[(FeatureKey, FeatureValue)]) -> O {
        (self.f)(features)
    }
}

/// Immutable view of a set of features, all current at `epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSnapshot {
    epoch: Epoch,
    values: BTreeMap<FeatureKey, (FeatureValue, Epoch)>,
}

impl FeatureSnapshot {
    pub fn epoch(&self) -> Epoch {
        self.epoch
    }

    pub fn get(&self, key: &FeatureKey) -> Option<&FeatureValue> {
        self.values.get(key).map(|(v, _)| v)
    }

    pub fn last_updated(&self, key: &FeatureKey) -> Option<Epoch> {
        self.values.get(key).map(|(_, e)| *e)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureKey, &FeatureValue, Epoch)> {
        self.values.iter().map(|(k, (v, e))| (k, v, *e))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Result of [`OutputPipe::poll`].
#[derive(Debug, Clone, PartialEq)]
pub enum Poll<O> {
    Fresh {
        output: O,
        snapshot: FeatureSnapshot,
    },
    Unchanged,
    NotReady(Vec<FeatureKey>),
}

impl<O> Poll<O> {
    pub fn fresh(self) -> Option<O> {
        match self {
            Poll::Fresh { output, .. } => Some(output),
            _ => None,
        }
    }

    pub fn is_fresh(&self) -> bool {
        matches!(self, Poll::Fresh { .. })
    }
}

type SlotId = usize;

struct Slot {
    key: FeatureKey,
    value: Option<(FeatureValue, Epoch)>,
}

#[derive(Default)]
struct ValueTable {
    epoch: u64,
    slots: Vec<Slot>,
}

struct NodeData {
    parent: Option<NodeId>,
    inputs: HashMap<FeatureKey, SlotId>,
    outputs: HashMap<String, usize>,
    children: Vec<NodeId>,
}

struct Association<O> {
    node: NodeId,
    inputs: Vec<FeatureKey>,
    resolved: Vec<Option<(NodeId, SlotId)>>,
    model: Arc<dyn Model<O>>,
    // bumped on model swap and on re-resolution; a changed generation forces Fresh
    generation: u64,
}

struct Topology<O> {
    nodes: Vec<NodeData>,
    assocs: Vec<Association<O>>,
}

impl<O> Topology<O> {
    fn resolve(&self, mut node: NodeId, key: &FeatureKey) -> Option<(NodeId, SlotId)> {
        loop {
            let data = &self.nodes[node.0];
            if let Some(&slot) = data.inputs.get(key) {
                return Some((node, slot));
            }
            node = data.parent?;
        }
    }

    fn is_ancestor_or_self(&self, ancestor: NodeId, mut node: NodeId) -> bool {
        loop {
            if node == ancestor {
                return true;
            }
            match self.nodes[node.0].parent {
                Some(p) => node = p,
                None => return false,
            }
        }
    }

    fn find_output(&self, mut node: NodeId, name: &str) -> Option<usize> {
        loop {
            let data = &self.nodes[node.0];
            if let Some(&id) = data.outputs.get(name) {
                return Some(id);
            }
            node = data.parent?;
        }
    }
}

struct ValueStore {
    table: RwLock<ValueTable>,
}

impl ValueStore {
    fn read(&self) -> RwLockReadGuard<'_, ValueTable> {
        self.table.read().expect("broker value lock poisoned")
    }

    fn write(&self) -> RwLockWriteGuard<'_, ValueTable> {
        self.table.write().expect("broker value lock poisoned")
    }
}

struct Shared<O> {
    // lock order: topology before values
    topology: RwLock<Topology<O>>,
    store: Arc<ValueStore>,
}

impl<O> Shared<O> {
    fn topo(&self) -> RwLockReadGuard<'_, Topology<O>> {
        self.topology.read().expect("broker topology lock poisoned")
    }

    fn topo_mut(&self) -> RwLockWriteGuard<'_, Topology<O>> {
        self.topology
            .write()
            .expect("broker topology lock poisoned")
    }
}

/// A broker tree. Cloning yields another handle to the same tree.
pub struct FeatureBroker<O> {
    shared: Arc<Shared<O>>,
}

impl<O> Clone for FeatureBroker<O> {
    fn clone(&self) -> Self {
        Self {
            shared: Arc::clone(&self.shared),
        }
    }
}

impl<O> Default for FeatureBroker<O> {
    fn default() -> Self {
        Self::new()
    }
}

impl<O> FeatureBroker<O> {
    pub fn new() -> Self {
        let root = NodeData {
            parent: None,
            inputs: HashMap::new(),
            outputs: HashMap::new(),
            children: Vec::new(),
        };
        Self {
            shared: Arc::new(Shared {
                topology: RwLock::new(Topology {
                    nodes: vec![root],
                    assocs: Vec::new(),
                }),
                store: Arc::new(ValueStore {
                    table: RwLock::new(ValueTable::default()),
                }),
            }),
        }
    }

    pub fn root(&self) -> BrokerNode<O> {
        BrokerNode {
            shared: Arc::clone(&self.shared),
            id: NodeId(0),
        }
    }

    /// Latest committed epoch.
    pub fn epoch(&self) -> Epoch {
        Epoch(self.shared.store.read().epoch)
    }

    /// Commit several values at a single epoch.
    ///
    /// An empty batch is a no-op returning the current epoch.
    pub fn publish_batch(
        &self,
        pairs: &[(&InputPipe, FeatureValue)],
    ) -> Result<Epoch, BrokerError> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for (pipe, value) in pairs {
            if !Arc::ptr_eq(&pipe.store, &self.shared.store) {
                return Err(BrokerError::ForeignPipe(pipe.key.clone()));
            }
            pipe.check(value)?;
            if !seen.insert(pipe.slot) {
                return Err(BrokerError::DuplicatePipeInBatch(pipe.key.clone()));
            }
        }
        let mut table = self.shared.store.write();
        if pairs.is_empty() {
            return Ok(Epoch(table.epoch));
        }
        table.epoch += 1;
        let epoch = Epoch(table.epoch);
        for (pipe, value) in pairs {
            table.slots[pipe.slot].value = Some((value.clone(), epoch));
        }
        Ok(epoch)
    }

    /// Atomically replace the model behind an association.
    ///
    /// The next poll of every output bound to it is Fresh.
    pub fn swap_model(
        &self,
        handle: ModelHandle,
        model: Arc<dyn Model<O>>,
    ) -> Result<(), BrokerError> {
        let mut topo = self.shared.topo_mut();
        let assoc = &mut topo.assocs[handle.0];
        if model.arity() != assoc.inputs.len() {
            return Err(BrokerError::ArityMismatch {
                expected: model.arity(),
                got: assoc.inputs.len(),
            });
        }
        assoc.model = model;
        assoc.generation += 1;
        Ok(())
    }
}

/// Handle to one node of a broker tree.
pub struct BrokerNode<O> {
    shared: Arc<Shared<O>>,
    id: NodeId,
}

impl<O> Clone for BrokerNode<O> {
    fn clone(&self) -> Self {
        Self {
            shared: Arc::clone(&self.shared),
            id: self.id,
        }
    }
}

impl<O> BrokerNode<O> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.shared.topo().nodes[self.id.0].parent
    }

    pub fn children(&self) -> Vec<NodeId> {
        self.shared.topo().nodes[self.id.0].children.clone()
    }

    /// Create a child node inheriting this node's bindings.
    pub fn fork(&self) -> BrokerNode<O> {
        let mut topo = self.shared.topo_mut();
        let id = NodeId(topo.nodes.len());
        topo.nodes.push(NodeData {
            parent: Some(self.id),
            inputs: HashMap::new(),
            outputs: HashMap::new(),
            children: Vec::new(),
        });
        topo.nodes[self.id.0].children.push(id);
        BrokerNode {
            shared: Arc::clone(&self.shared),
            id,
        }
    }

    /// Bind a typed input on this node. Shadowing an ancestor's key is allowed.
    ///
    /// Associations in this node's subtree that depended on the shadowed
    /// binding re-resolve to the new pipe; their next poll waits for the new
    /// pipe's first publish.
    pub fn bind_input(&self, key: FeatureKey, kind: ValueKind) -> Result<InputPipe, BrokerError> {
        let mut topo = self.shared.topo_mut();
        if topo.nodes[self.id.0].inputs.contains_key(&key) {
            return Err(BrokerError::DuplicateBinding(key));
        }
        let slot = {
            let mut table = self.shared.store.write();
            table.slots.push(Slot {
                key: key.clone(),
                value: None,
            });
            table.slots.len() - 1
        };
        topo.nodes[self.id.0].inputs.insert(key.clone(), slot);

        let me = self.id;
        for i in 0..topo.assocs.len() {
            let node = topo.assocs[i].node;
            if !topo.is_ancestor_or_self(me, node) {
                continue;
            }
            let mut changed = false;
            for j in 0..topo.assocs[i].inputs.len() {
                if topo.assocs[i].inputs[j] != key {
                    continue;
                }
                let next = topo.resolve(node, &key);
                if topo.assocs[i].resolved[j] != next {
                    topo.assocs[i].resolved[j] = next;
                    changed = true;
                }
            }
            if changed {
                topo.assocs[i].generation += 1;
            }
        }

        Ok(InputPipe {
            store: Arc::clone(&self.shared.store),
            slot,
            key,
            kind,
            owner: self.id,
        })
    }

    /// [`bind_input`](Self::bind_input) from raw key components.
    pub fn bind(
        &self,
        namespace: &str,
        name: &str,
        kind: ValueKind,
    ) -> Result<InputPipe, BrokerError> {
        self.bind_input(FeatureKey::new(namespace, name)?, kind)
    }

    /// Register `model` as the scheme producing `output_name` from `inputs`.
    pub fn associate_model(
        &self,
        model: Arc<dyn Model<O>>,
        inputs: Vec<FeatureKey>,
        output_name: &str,
    ) -> Result<ModelHandle, BrokerError> {
        if model.arity() != inputs.len() {
            return Err(BrokerError::ArityMismatch {
                expected: model.arity(),
                got: inputs.len(),
            });
        }
        let mut topo = self.shared.topo_mut();
        if topo.nodes[self.id.0].outputs.contains_key(output_name) {
            return Err(BrokerError::DuplicateOutputName(output_name.to_owned()));
        }
        let resolved = inputs.iter().map(|k| topo.resolve(self.id, k)).collect();
        let id = topo.assocs.len();
        topo.assocs.push(Association {
            node: self.id,
            inputs,
            resolved,
            model,
            generation: 0,
        });
        topo.nodes[self.id.0]
            .outputs
            .insert(output_name.to_owned(), id);
        Ok(ModelHandle(id))
    }

    /// Bind a consumer pipe to an output associated here or on an ancestor.
    pub fn bind_output(&self, output_name: &str) -> Result<OutputPipe<O>, BrokerError> {
        let topo = self.shared.topo();
        let assoc = topo
            .find_output(self.id, output_name)
            .ok_or_else(|| BrokerError::UnknownOutput(output_name.to_owned()))?;
        Ok(OutputPipe {
            shared: Arc::clone(&self.shared),
            assoc,
            name: output_name.to_owned(),
            last_consumed: Epoch(0),
            seen_generation: topo.assocs[assoc].generation,
        })
    }

    /// Node owning the binding `key` resolves to from here, if any.
    pub fn resolve(&self, key: &FeatureKey) -> Option<NodeId> {
        self.shared.topo().resolve(self.id, key).map(|(n, _)| n)
    }

    /// Node owning each input of the model behind `handle`, in declaration order.
    pub fn resolved_inputs(&self, handle: ModelHandle) -> Vec<Option<NodeId>> {
        let topo = self.shared.topo();
        topo.assocs[handle.0]
            .resolved
            .iter()
            .map(|r| r.map(|(n, _)| n))
            .collect()
    }
}

/// Producer side of a single feature binding. Usable from any thread.
#[derive(Clone)]
pub struct InputPipe {
    store: Arc<ValueStore>,
    slot: SlotId,
    key: FeatureKey,
    kind: ValueKind,
    owner: NodeId,
}

impl fmt::Debug for InputPipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InputPipe")
            .field("key", &self.key)
            .field("kind", &self.kind)
            .field("owner", &self.owner)
            .finish()
    }
}

impl InputPipe {
    pub fn key(&self) -> &FeatureKey {
        &self.key
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    fn check(&self, value: &FeatureValue) -> Result<(), BrokerError> {
        if value.kind() != self.kind {
            return Err(BrokerError::KindMismatch {
                key: self.key.clone(),
                expected: self.kind,
                got: value.kind(),
            });
        }
        if !value.is_finite() {
            return Err(BrokerError::NonFiniteValue(self.key.clone()));
        }
        Ok(())
    }

    pub fn publish(&self, value: FeatureValue) -> Result<Epoch, BrokerError> {
        self.check(&value)?;
        let mut table = self.store.write();
        table.epoch += 1;
        let epoch = Epoch(table.epoch);
        table.slots[self.slot].value = Some((value, epoch));
        Ok(epoch)
    }
}

/// Consumer side of a model output. Single consumer: polling needs `&mut`.
pub struct OutputPipe<O> {
    shared: Arc<Shared<O>>,
    assoc: usize,
    name: String,
    last_consumed: Epoch,
    seen_generation: u64,
}

impl<O> OutputPipe<O> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn handle(&self) -> ModelHandle {
        ModelHandle(self.assoc)
    }

    pub fn last_consumed_epoch(&self) -> Epoch {
        self.last_consumed
    }

    pub fn poll(&mut self) -> Poll<O> {
        let (model, generation, snapshot, features) = {
            let topo = self.shared.topo();
            let assoc = &topo.assocs[self.assoc];
            let table = self.shared.store.read();

            let missing: Vec<FeatureKey> = assoc
                .inputs
                .iter()
                .zip(&assoc.resolved)
                .filter(|(_, r)| r.is_none_or(|(_, s)| table.slots[s].value.is_none()))
                .map(|(k, _)| k.clone())
                .collect();
            if !missing.is_empty() {
                return Poll::NotReady(missing);
            }

            let current: Vec<&(FeatureValue, Epoch)> = assoc
                .resolved
                .iter()
                .map(|r| {
                    table.slots[r.expect("checked above").1]
                        .value
                        .as_ref()
                        .expect("checked above")
                })
                .collect();
            let newest = current.iter().map(|(_, e)| *e).max().unwrap_or_default();
            if newest <= self.last_consumed && assoc.generation == self.seen_generation {
                return Poll::Unchanged;
            }

            let features: Vec<(FeatureKey, FeatureValue)> = assoc
                .inputs
                .iter()
                .cloned()
                .zip(current.iter().map(|(v, _)| v.clone()))
                .collect();
            let values = assoc
                .resolved
                .iter()
                .zip(&current)
                .map(|(r, (v, e))| {
                    let slot = r.expect("checked above").1;
                    (table.slots[slot].key.clone(), (v.clone(), *e))
                })
                .collect();
            let snapshot = FeatureSnapshot {
                epoch: Epoch(table.epoch),
                values,
            };
            (
                Arc::clone(&assoc.model),
                assoc.generation,
                snapshot,
                features,
            )
        };

        let output = model.evaluate(&features);
        self.last_consumed = snapshot.epoch;
        self.seen_generation = generation;
        Poll::Fresh { output, snapshot }
    }
}
