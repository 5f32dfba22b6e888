//! Procedural indoor scenes.
//!
//! A room is drawn from an archetype (bedroom, kitchen, ...). Each archetype
//! holds a few functional zones; every zone is seeded with its anchor
//! category and filled with member categories placed at a category-specific
//! distance from the zone anchor. A random subset of objects is then masked:
//! masked categories become localisation targets. The matching knowledge
//! snapshot links categories to their zone's location and function concepts,
//! and the embedding table is built from those concepts, so commonsense
//! carries real signal about the layout.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{DatasetError, SceneObject, SceneRecord, TargetSpec};
use crate::geometry::Point2;
use crate::graph::EdgeKind;
use crate::knowledge::{EmbeddingTable, KnowledgeSnapshot, Triple};

const MAX_ATTEMPTS: usize = 1000;
pub const DEFAULT_TAIL_PER_ZONE: usize = 80;
pub const DEFAULT_TAIL_FREQUENCY: f64 = 0.3;
/// Members whose mean distance to the zone anchor is at most this get an
/// AtLocation link to the anchor.
pub const PLACE_RADIUS: f64 = 0.6;

/// Truncated Gaussian distance law: N(mean, sd²) resampled below `min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceLaw {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
}

impl DistanceLaw {
    pub const fn new(mean: f64, sd: f64, min: f64) -> Self {
        Self { mean, sd, min }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, DatasetError> {
        let normal = Normal::new(self.mean, self.sd)
            .map_err(|e| DatasetError::Spec(format!("invalid distance law: {e}")))?;
        for _ in 0..MAX_ATTEMPTS {
            let d = normal.sample(rng);
            if d >= self.min {
                return Ok(d);
            }
        }
        Err(DatasetError::Spec(format!(
            "distance law N({}, {}) rarely exceeds min {}",
            self.mean, self.sd, self.min
        )))
    }
}

#[derive(Debug, Clone)]
pub struct CategorySpec {
    pub name: String,
    /// Relative sampling frequency within its zone.
    pub frequency: f64,
    /// Distance from the zone anchor.
    pub law: DistanceLaw,
    /// Concepts describing what the object is used for (besides the zone function).
    pub uses: Vec<String>,
    /// Extra AtLocation concepts (besides the zone location).
    pub places: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Zone {
    pub name: String,
    /// AtLocation concept shared by every member.
    pub location: String,
    /// UsedFor concept shared by every member.
    pub function: String,
    pub anchor: CategorySpec,
    pub members: Vec<CategorySpec>,
}

#[derive(Debug, Clone)]
pub struct Archetype {
    pub name: String,
    /// Indices into [`GeneratorSpec::zones`].
    pub zones: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub zones: Vec<Zone>,
    pub archetypes: Vec<Archetype>,
    /// Room side lengths are drawn uniformly from this range (metres).
    pub room_extent: (f64, f64),
    /// Minimum distance between zone anchors.
    pub zone_separation: f64,
    /// Members per zone, inclusive range (anchor excluded).
    pub members_per_zone: (usize, usize),
    /// Fraction of objects hidden from the observed part, uniform in this range.
    pub mask_fraction: (f64, f64),
    /// Objects closer than this are rejected as overlapping.
    pub min_separation: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

/// Generated scenes with the knowledge snapshot and embeddings that go with them.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub records: Vec<SceneRecord>,
    pub knowledge: KnowledgeSnapshot,
    pub embeddings: EmbeddingTable,
}

fn cat(name: &str, frequency: f64, mean: f64, sd: f64, uses: &[&str]) -> CategorySpec {
    CategorySpec {
        name: name.to_string(),
        frequency,
        law: DistanceLaw::new(mean, sd, 0.1),
        uses: uses.iter().map(|s| s.to_string()).collect(),
        places: Vec::new(),
    }
}

fn zone(name: &str, location: &str, function: &str, anchor: CategorySpec, members: Vec<CategorySpec>) -> Zone {
    Zone {
        name: name.to_string(),
        location: location.to_string(),
        function: function.to_string(),
        anchor,
        members,
    }
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let mut zones = vec![
            zone("sleeping", "bedroom", "sleeping", cat("bed", 1.0, 0.0, 0.0, &["resting"]), vec![
                cat("pillow", 4.0, 0.5, 0.2, &["resting_head"]),
                cat("nightstand", 3.0, 1.1, 0.2, &["holding_things"]),
                cat("blanket", 2.0, 0.6, 0.2, &["keeping_warm"]),
                cat("lamp", 2.0, 1.3, 0.3, &["lighting"]),
                cat("alarm_clock", 1.0, 1.2, 0.3, &["waking_up"]),
                cat("dresser", 1.0, 2.0, 0.4, &["storing_clothes"]),
            ]),
            zone("work", "study", "working", cat("desk", 1.0, 0.0, 0.0, &["writing"]), vec![
                cat("office_chair", 4.0, 0.6, 0.2, &["sitting"]),
                cat("monitor", 3.0, 0.4, 0.15, &["displaying"]),
                cat("keyboard", 2.0, 0.4, 0.15, &["typing"]),
                cat("desk_lamp", 1.5, 0.5, 0.2, &["lighting"]),
                cat("printer", 1.0, 1.3, 0.3, &["printing"]),
                cat("bookshelf", 1.0, 1.8, 0.4, &["storing_books"]),
            ]),
            zone("dining", "dining_room", "eating", cat("dining_table", 1.0, 0.0, 0.0, &["serving_food"]), vec![
                cat("chair", 5.0, 0.7, 0.2, &["sitting"]),
                cat("plate", 2.0, 0.3, 0.15, &["holding_food"]),
                cat("cup", 2.0, 0.35, 0.15, &["drinking"]),
                cat("vase", 1.0, 0.3, 0.15, &["holding_flowers"]),
                cat("candle", 0.7, 0.35, 0.15, &["lighting"]),
                cat("sideboard", 0.7, 1.9, 0.4, &["storing_dishes"]),
            ]),
            zone("cooking", "kitchen", "cooking", cat("stove", 1.0, 0.0, 0.0, &["heating_food"]), vec![
                cat("refrigerator", 3.0, 1.6, 0.4, &["keeping_food_cold"]),
                cat("sink", 3.0, 1.0, 0.3, &["washing_dishes"]),
                cat("microwave", 2.0, 0.9, 0.3, &["heating_food"]),
                cat("kettle", 1.5, 0.4, 0.15, &["boiling_water"]),
                cat("kitchen_cabinet", 2.0, 0.8, 0.3, &["storing_dishes"]),
                cat("cutting_board", 0.7, 0.7, 0.2, &["chopping"]),
            ]),
            zone("bathing", "bathroom", "washing", cat("bathtub", 1.0, 0.0, 0.0, &["bathing"]), vec![
                cat("toilet", 4.0, 1.3, 0.3, &["excretion"]),
                cat("towel", 3.0, 0.6, 0.2, &["drying"]),
                cat("washbasin", 3.0, 1.2, 0.3, &["washing_hands"]),
                cat("bath_mat", 1.5, 0.5, 0.15, &["standing_on"]),
                cat("mirror", 1.0, 1.3, 0.3, &["seeing_reflection"]),
                cat("toilet_paper", 0.7, 1.4, 0.3, &["cleaning"]),
            ]),
            zone("lounging", "living_room", "relaxing", cat("sofa", 1.0, 0.0, 0.0, &["sitting"]), vec![
                cat("coffee_table", 4.0, 0.8, 0.2, &["holding_things"]),
                cat("tv", 3.0, 2.4, 0.4, &["watching"]),
                cat("cushion", 2.5, 0.3, 0.15, &["comfort"]),
                cat("armchair", 2.0, 1.3, 0.3, &["sitting"]),
                cat("rug", 1.0, 0.9, 0.3, &["decorating_floor"]),
                cat("remote", 0.7, 0.6, 0.3, &["changing_channel"]),
            ]),
            zone("storage", "closet", "storing", cat("wardrobe", 1.0, 0.0, 0.0, &["storing_clothes"]), vec![
                cat("shelf", 3.0, 0.9, 0.3, &["holding_things"]),
                cat("box", 3.0, 0.7, 0.3, &["containing"]),
                cat("basket", 2.0, 0.6, 0.2, &["carrying"]),
                cat("laundry_hamper", 1.0, 0.8, 0.3, &["collecting_laundry"]),
                cat("ironing_board", 0.7, 1.2, 0.3, &["ironing"]),
                cat("suitcase", 0.7, 0.7, 0.3, &["travelling"]),
            ]),
            zone("entry", "hallway", "entering", cat("door", 1.0, 0.0, 0.0, &["entering"]), vec![
                cat("shoe_rack", 3.0, 0.7, 0.2, &["storing_shoes"]),
                cat("coat_rack", 2.5, 0.8, 0.2, &["hanging_coats"]),
                cat("doormat", 2.0, 0.4, 0.15, &["wiping_feet"]),
                cat("umbrella_stand", 1.0, 0.6, 0.2, &["holding_umbrellas"]),
                cat("key_hook", 0.7, 0.5, 0.2, &["hanging_keys"]),
                cat("bench", 0.7, 1.2, 0.3, &["sitting"]),
            ]),
        ];
        let archetypes = [
            ("bedroom", vec![0, 6, 1]),
            ("office", vec![1, 6, 5]),
            ("kitchen", vec![3, 2]),
            ("bathroom", vec![4, 6]),
            ("living_room", vec![5, 2, 7]),
            ("studio", vec![0, 3, 5]),
            ("hallway", vec![7, 6]),
        ]
        .into_iter()
        .map(|(name, zones)| Archetype { name: name.to_string(), zones })
        .collect();
        for z in &mut zones {
            let anchor = z.anchor.name.clone();
            for m in z.members.iter_mut().filter(|m| m.law.mean <= PLACE_RADIUS) {
                m.places.push(anchor.clone());
            }
        }
        let mut spec = GeneratorSpec {
            zones,
            archetypes,
            room_extent: (4.5, 8.0),
            zone_separation: 2.0,
            members_per_zone: (2, 5),
            mask_fraction: (0.2, 0.6),
            min_separation: 0.3,
            embedding_dim: 128,
            seed: 0,
        };
        spec.add_long_tail(DEFAULT_TAIL_PER_ZONE, DEFAULT_TAIL_FREQUENCY);
        spec
    }
}

impl GeneratorSpec {
    /// Append `per_zone` rare members named `<location>_item<k>` to every
    /// zone. Even-numbered ones sit next to the zone anchor and are linked to
    /// it by an AtLocation triple; odd-numbered ones keep their distance.
    pub fn add_long_tail(&mut self, per_zone: usize, frequency: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7461_696c);
        for z in &mut self.zones {
            for k in 0..per_zone {
                let near = k % 2 == 0;
                let mean = if near { rng.random_range(0.35..0.55) } else { rng.random_range(1.3..1.7) };
                z.members.push(CategorySpec {
                    name: format!("{}_item{k:02}", z.location),
                    frequency,
                    law: DistanceLaw::new((mean * 20.0_f64).round() / 20.0, if near { 0.12 } else { 0.25 }, 0.1),
                    uses: Vec::new(),
                    places: if near { vec![z.anchor.name.clone()] } else { Vec::new() },
                });
            }
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Spec(m));
        if self.zones.is_empty() || self.archetypes.is_empty() {
            return bad("at least one zone and one archetype required".into());
        }
        for a in &self.archetypes {
            if a.zones.is_empty() || a.zones.iter().any(|&z| z >= self.zones.len()) {
                return bad(format!("archetype `{}` references an unknown zone", a.name));
            }
        }
        for z in &self.zones {
            if z.members.is_empty() {
                return bad(format!("zone `{}` has no members", z.name));
            }
            for m in &z.members {
                if !(m.law.mean > 0.0 && m.law.sd >= 0.0 && m.frequency > 0.0) {
                    return bad(format!("category `{}` needs a positive mean and frequency", m.name));
                }
            }
        }
        let (lo, hi) = self.room_extent;
        if !(lo > 2.0 * self.min_separation && hi >= lo) {
            return bad("room extent must exceed twice the object separation and be ordered".into());
        }
        let (mlo, mhi) = self.mask_fraction;
        if !(0.0..1.0).contains(&mlo) || !(mlo..1.0).contains(&mhi) {
            return bad("mask fraction must lie in [0, 1)".into());
        }
        if self.members_per_zone.0 > self.members_per_zone.1 || self.embedding_dim == 0 {
            return bad("invalid member range or embedding dimension".into());
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<&CategorySpec> {
        let mut seen = BTreeSet::new();
        self.zones
            .iter()
            .flat_map(|z| std::iter::once(&z.anchor).chain(z.members.iter()))
            .filter(|c| seen.insert(c.name.as_str()))
            .collect()
    }

    /// Concept triples for every category. Noise concepts with weight ≤ 1
    /// are included so the weight filter has something to remove.
    pub fn knowledge(&self) -> KnowledgeSnapshot {
        let mut kb = KnowledgeSnapshot::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6b6e_6f77);
        let add = |kb: &mut KnowledgeSnapshot, rel, s: &str, c: &str, w: f64| {
            kb.insert(Triple {
                relation: rel,
                subject: s.to_string(),
                concept: c.to_string(),
                weight: (w * 1000.0).round() / 1000.0,
            })
        };
        for z in &self.zones {
            for c in std::iter::once(&z.anchor).chain(&z.members) {
                add(&mut kb, EdgeKind::AtLocation, &c.name, &z.location, rng.random_range(2.0..4.0));
                add(&mut kb, EdgeKind::AtLocation, &c.name, "house", rng.random_range(1.05..1.5));
                add(&mut kb, EdgeKind::AtLocation, &c.name, "store", rng.random_range(0.3..0.95));
                add(&mut kb, EdgeKind::UsedFor, &c.name, &z.function, rng.random_range(2.0..4.0));
                for u in &c.uses {
                    add(&mut kb, EdgeKind::UsedFor, &c.name, u, rng.random_range(1.2..3.0));
                }
                for p in &c.places {
                    add(&mut kb, EdgeKind::AtLocation, &c.name, p, rng.random_range(1.5..3.5));
                }
            }
        }
        kb
    }

    /// Every token gets a random base direction. A category embedding blends
    /// its base with the mean of its concepts' bases; concepts that are
    /// themselves categories (places next to another object) count again.
    pub fn embeddings(&self, kb: &KnowledgeSnapshot) -> EmbeddingTable {
        let dim = self.embedding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x656d_6265);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
        let subjects: BTreeSet<&str> = kb.triples().iter().map(|t| t.subject.as_str()).collect();
        let tokens: BTreeSet<&str> = kb.triples().iter().flat_map(|t| [t.subject.as_str(), t.concept.as_str()]).collect();
        let base: BTreeMap<&str, Vec<f64>> =
            tokens.iter().map(|t| (*t, (0..dim).map(|_| normal.sample(&mut rng)).collect())).collect();
        let mut table = EmbeddingTable::new(dim);
        for t in &tokens {
            let mut v: Vec<f64> = base[t].iter().map(|x| 0.7 * x).collect();
            if subjects.contains(t) {
                let related: Vec<(&str, bool)> = [EdgeKind::AtLocation, EdgeKind::UsedFor]
                    .iter()
                    .flat_map(|&rel| kb.query(t, rel))
                    .map(|(c, _)| {
                        let c = tokens.get(c.as_str()).copied().expect("concept is a token");
                        (c, subjects.contains(c))
                    })
                    .collect();
                for (c, place) in &related {
                    let w = 0.6 / related.len() as f64 + if *place { 0.6 } else { 0.0 };
                    for (vi, ri) in v.iter_mut().zip(&base[c]) {
                        *vi += w * ri;
                    }
                }
            } else {
                v = base[t].clone();
            }
            table.insert(*t, v);
        }
        table
    }

    fn place_scene(&self, rng: &mut ChaCha8Rng) -> Result<Vec<(String, Point2)>, DatasetError> {
        let archetype = self.archetypes.choose(rng).expect("validated non-empty");
        let (lo, hi) = self.room_extent;
        let width = rng.random_range(lo..=hi);
        let depth = rng.random_range(lo..=hi);
        let margin = self.min_separation;
        let inside = |p: &Point2| {
            p.x >= margin && p.x <= width - margin && p.y >= margin && p.y <= depth - margin
        };
        let mut placed: Vec<(String, Point2)> = Vec::new();
        let clear = |placed: &[(String, Point2)], p: &Point2, gap: f64| {
            placed.iter().all(|(_, q)| q.distance(p) >= gap)
        };
        let mut anchors = Vec::new();
        for &zi in &archetype.zones {
            let zone = &self.zones[zi];
            let mut spot = None;
            for _ in 0..MAX_ATTEMPTS {
                let p = Point2::new(rng.random_range(margin..width - margin), rng.random_range(margin..depth - margin));
                if anchors.iter().all(|q: &Point2| q.distance(&p) >= self.zone_separation)
                    && clear(&placed, &p, self.min_separation)
                {
                    spot = Some(p);
                    break;
                }
            }
            let p = spot.ok_or_else(|| {
                DatasetError::Spec(format!("could not place zone `{}` in a {width:.1}x{depth:.1} room", zone.name))
            })?;
            anchors.push(p);
            placed.push((zone.anchor.name.clone(), p));
        }
        for (k, &zi) in archetype.zones.iter().enumerate() {
            let zone = &self.zones[zi];
            let count = rng.random_range(self.members_per_zone.0..=self.members_per_zone.1);
            let weights: Vec<f64> = zone.members.iter().map(|m| m.frequency).collect();
            let picker = rand_distr::weighted::WeightedIndex::new(&weights)
                .map_err(|e| DatasetError::Spec(e.to_string()))?;
            for _ in 0..count {
                let member = &zone.members[picker.sample(rng)];
                let mut spot = None;
                for _ in 0..MAX_ATTEMPTS {
                    let d = member.law.sample(rng)?;
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let p = Point2::new(anchors[k].x + d * theta.cos(), anchors[k].y + d * theta.sin());
                    if inside(&p) && clear(&placed, &p, self.min_separation) {
                        spot = Some(p);
                        break;
                    }
                }
                let p = spot.ok_or_else(|| {
                    DatasetError::Spec(format!(
                        "could not place `{}` after {MAX_ATTEMPTS} attempts",
                        member.name
                    ))
                })?;
                placed.push((member.name.clone(), p));
            }
        }
        Ok(placed)
    }

    fn scene(&self, index: usize) -> Result<SceneRecord, DatasetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index as u64);
        let placed = self.place_scene(&mut rng)?;
        let n = placed.len();
        let fraction = rng.random_range(self.mask_fraction.0..=self.mask_fraction.1);
        let hidden = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(3));
        if n < 4 || hidden == 0 {
            return Err(DatasetError::Spec("scenes need at least 4 objects".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut masked = vec![false; n];
        for &i in &order[..hidden] {
            masked[i] = true;
        }
        let mut objects = Vec::new();
        let mut targets: BTreeMap<&str, Vec<Point2>> = BTreeMap::new();
        for (i, (category, p)) in placed.iter().enumerate() {
            if masked[i] {
                targets.entry(category.as_str()).or_default().push(*p);
            } else {
                objects.push(SceneObject { id: i as u32, category: category.clone(), position: *p });
            }
        }
        Ok(SceneRecord {
            scene_id: format!("synth{index:05}_p0"),
            completeness: objects.len() as f64 / n as f64,
            objects,
            targets: targets
                .into_iter()
                .map(|(c, gt)| TargetSpec { category: c.to_string(), gt_positions: gt })
                .collect(),
        })
    }
}

/// Scenes `first..first + n_scenes`; scene `i` uses seed `spec.seed ^ i`.
pub fn generate(spec: &GeneratorSpec, first: usize, n_scenes: usize) -> Result<GeneratedCorpus, DatasetError> {
    spec.validate()?;
    let records = (first..first + n_scenes)
        .into_par_iter()
        .map(|i| spec.scene(i))
        .collect::<Result<Vec<_>, _>>()?;
    let knowledge = spec.knowledge();
    let embeddings = spec.embeddings(&knowledge);
    Ok(GeneratedCorpus { records, knowledge, embeddings })
}

/// Mean ground-plane distance over all object pairs (observed and hidden) of each record.
pub fn pairwise_distance_mean(records: &[SceneRecord]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for r in records {
        let pts: Vec<Point2> = r
            .objects
            .iter()
            .map(|o| o.position)
            .chain(r.targets.iter().flat_map(|t| t.gt_positions.iter().copied()))
            .collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                sum += pts[i].distance(&pts[j]);
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}
