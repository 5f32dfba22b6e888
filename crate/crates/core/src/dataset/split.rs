use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SceneRecord;

/// Source-scene prefix: everything before the last `_`, or the whole id.
pub fn group_key(scene_id: &str) -> &str {
    match scene_id.rfind('_') {
        Some(i) if i > 0 => &scene_id[..i],
        _ => scene_id,
    }
}

/// Group-level random split into (train, val). Partial views of one source
/// scene always land on the same side.
pub fn split(records: &[SceneRecord], val_fraction: f64, seed: u64) -> (Vec<SceneRecord>, Vec<SceneRecord>) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(group_key(&r.scene_id)).or_default().push(i);
    }
    let mut keys: Vec<&str> = groups.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    let n_val = ((keys.len() as f64) * val_fraction.clamp(0.0, 1.0)).round() as usize;
    let val_keys: HashSet<&str> = keys[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for r in records {
        if val_keys.contains(group_key(&r.scene_id)) {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, val)
}
