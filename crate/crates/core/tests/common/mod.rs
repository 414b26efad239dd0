//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resonance::feature::{FeatureKey, FeatureValue, ValueKind};
use resonance::feature_broker::{BrokerNode, FeatureBroker, FnModel, Model, NodeId};

pub fn key(ns: &str, name: &str) -> FeatureKey {
    FeatureKey::new(ns, name).unwrap()
}

/// Plain parent-pointer model of a broker tree.
#[derive(Debug, Default)]
pub struct ReferenceTree {
    pub parent: Vec<Option<usize>>,
    pub bound: Vec<BTreeSet<FeatureKey>>,
}

impl ReferenceTree {
    /// Nearest node at or above `node` binding `key`.
    pub fn walk_up(&self, mut node: usize, key: &FeatureKey) -> Option<usize> {
        loop {
            if self.bound[node].contains(key) {
                return Some(node);
            }
            node = self.parent[node]?;
        }
    }

    pub fn depth(&self, mut node: usize) -> usize {
        let mut d = 1;
        while let Some(p) = self.parent[node] {
            d += 1;
            node = p;
        }
        d
    }
}

pub struct RandomTree {
    pub broker: FeatureBroker<String>,
    pub nodes: Vec<BrokerNode<String>>,
    pub reference: ReferenceTree,
    pub keys: Vec<FeatureKey>,
    /// (node index, inputs) per association, in creation order.
    pub associations: Vec<(
        usize,
        Vec<FeatureKey>,
        resonance::feature_broker::ModelHandle,
    )>,
}

/// Random tree of at most `max_depth` levels over at most `max_keys` keys,
/// with forks, bindings and model associations interleaved.
pub fn random_tree(seed: u64, max_depth: usize, max_keys: usize) -> RandomTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let broker = FeatureBroker::<String>::new();
    let n_keys = rng.random_range(1..=max_keys);
    let keys: Vec<FeatureKey> = (0..n_keys)
        .map(|i| key(&format!("ns{}", i % 3), &format!("k{i}")))
        .collect();
    let mut nodes = vec![broker.root()];
    let mut reference = ReferenceTree {
        parent: vec![None],
        bound: vec![BTreeSet::new()],
    };
    let mut associations = Vec::new();
    let ops = rng.random_range(5..60);
    for _ in 0..ops {
        match rng.random_range(0..10) {
            0..=2 => {
                let candidates: Vec<usize> = (0..nodes.len())
                    .filter(|&n| reference.depth(n) < max_depth)
                    .collect();
                if let Some(&p) = candidates.get(rng.random_range(0..candidates.len().max(1))) {
                    nodes.push(nodes[p].fork());
                    reference.parent.push(Some(p));
                    reference.bound.push(BTreeSet::new());
                }
            }
            3..=7 => {
                let n = rng.random_range(0..nodes.len());
                let k = keys[rng.random_range(0..keys.len())].clone();
                let ok = nodes[n].bind_input(k.clone(), ValueKind::Int).is_ok();
                assert_eq!(
                    ok,
                    reference.bound[n].insert(k),
                    "duplicate binding detection"
                );
            }
            _ => {
                let n = rng.random_range(0..nodes.len());
                let arity = rng.random_range(1..=keys.len().min(4));
                let inputs: Vec<FeatureKey> = (0..arity)
                    .map(|_| keys[rng.random_range(0..keys.len())].clone())
                    .collect();
                let model: Arc<dyn Model<String>> =
                    Arc::new(FnModel::new(arity, |_: &[(FeatureKey, FeatureValue)]| {
                        String::new()
                    }));
                let name = format!("out{}", associations.len());
                let h = nodes[n]
                    .associate_model(model, inputs.clone(), &name)
                    .unwrap();
                associations.push((n, inputs, h));
            }
        }
    }
    RandomTree {
        broker,
        nodes,
        reference,
        keys,
        associations,
    }
}

/// Mismatches between broker resolution and the walk-up oracle, over every
/// (node, key) pair and every association input.
pub fn resolution_mismatches(tree: &RandomTree) -> Vec<String> {
    let ids: BTreeMap<NodeId, usize> = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id(), i))
        .collect();
    let mut bad = Vec::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        for k in &tree.keys {
            let got = node.resolve(k).map(|id| ids[&id]);
            let want = tree.reference.walk_up(i, k);
            if got != want {
                bad.push(format!("node {i} key {k}: broker {got:?} oracle {want:?}"));
            }
        }
    }
    for (n, inputs, h) in &tree.associations {
        let got: Vec<Option<usize>> = tree.nodes[*n]
            .resolved_inputs(*h)
            .into_iter()
            .map(|r| r.map(|id| ids[&id]))
            .collect();
        let want: Vec<Option<usize>> = inputs
            .iter()
            .map(|k| tree.reference.walk_up(*n, k))
            .collect();
        if got != want {
            bad.push(format!(
                "association at node {n}: broker {got:?} oracle {want:?}"
            ));
        }
    }
    bad
}
