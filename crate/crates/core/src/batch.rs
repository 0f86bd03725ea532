//! Dynamic batching for mixed image/video training streams.
//!
//! Items are routed into FIFO queues keyed by aspect class and modality,
//! and batches are drawn greedily so the summed temporal length never
//! exceeds the budget. Images count as one frame each but are batched
//! strictly apart from videos, so a batch is always shape-homogeneous.
//! A deterministic fractional interleaver decides, batch by batch, whether
//! the next one should be image-only or video; when the wanted kind has
//! run dry the other kind substitutes silently, but a kind that was never
//! supplied at all trips a starvation error after a configurable patience.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionClass {
    Low,
    Medium,
    High,
}

/// One encoded training sample waiting to be batched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentItem {
    pub id: String,
    pub modality: Modality,
    /// Aspect-ratio bucket, e.g. "1:1" or "3:2". Items only ever share a
    /// batch with items from the same bucket.
    pub aspect_class: String,
    /// Length in latent frames; always 1 for images.
    pub temporal_length: u64,
    pub resolution_class: ResolutionClass,
}

impl LatentItem {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Parameter("item id must not be empty".into()));
        }
        if self.aspect_class.is_empty() {
            return Err(Error::Parameter(format!("item {} has an empty aspect class", self.id)));
        }
        if self.temporal_length == 0 {
            return Err(Error::Contract(format!(
                "item {} has temporal length 0",
                self.id
            )));
        }
        if self.modality == Modality::Image && self.temporal_length != 1 {
            return Err(Error::Contract(format!(
                "image {} claims {} frames; images are single-frame",
                self.id, self.temporal_length
            )));
        }
        Ok(())
    }
}

/// Parse one item per line. Line numbers are reported on failure; blank
/// lines are skipped.
pub fn parse_items_jsonl(text: &str) -> Result<Vec<LatentItem>> {
    let mut items = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: LatentItem = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", no + 1)))?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

/// Inverse of [`parse_items_jsonl`].
pub fn items_to_jsonl(items: &[LatentItem]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("item serialization cannot fail"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchKind {
    ImageOnly,
    Video,
}

impl Modality {
    fn batch_kind(self) -> BatchKind {
        match self {
            Modality::Image => BatchKind::ImageOnly,
            Modality::Video => BatchKind::Video,
        }
    }
}

/// One emitted batch: homogeneous in kind and aspect class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub kind: BatchKind,
    pub aspect_class: String,
    pub item_ids: Vec<String>,
    /// Sum of the members' temporal lengths; never exceeds the budget.
    pub total_temporal: u64,
}

/// The full schedule for one input stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub t_max: u64,
    pub target_image_fraction: f64,
    pub seed: u64,
    pub batches: Vec<Batch>,
}

/// Per-(aspect class, kind) usage figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueUsage {
    pub aspect_class: String,
    pub kind: BatchKind,
    pub batches: u64,
    pub items: u64,
    /// Mean of `total_temporal / t_max` over this queue's batches.
    pub mean_fill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub total_items: u64,
    pub total_batches: u64,
    pub image_batches: u64,
    pub video_batches: u64,
    pub target_image_fraction: f64,
    pub achieved_image_fraction: f64,
    pub per_queue: Vec<QueueUsage>,
}

impl BatchPlan {
    pub fn summary(&self) -> PlanSummary {
        let mut per: BTreeMap<(String, BatchKind), (u64, u64, f64)> = BTreeMap::new();
        let mut image_batches = 0u64;
        let mut total_items = 0u64;
        for b in &self.batches {
            if b.kind == BatchKind::ImageOnly {
                image_batches += 1;
            }
            total_items += b.item_ids.len() as u64;
            let e = per.entry((b.aspect_class.clone(), b.kind)).or_insert((0, 0, 0.0));
            e.0 += 1;
            e.1 += b.item_ids.len() as u64;
            e.2 += b.total_temporal as f64 / self.t_max as f64;
        }
        let total = self.batches.len() as u64;
        PlanSummary {
            total_items,
            total_batches: total,
            image_batches,
            video_batches: total - image_batches,
            target_image_fraction: self.target_image_fraction,
            achieved_image_fraction: if total == 0 {
                0.0
            } else {
                image_batches as f64 / total as f64
            },
            per_queue: per
                .into_iter()
                .map(|((aspect_class, kind), (batches, items, fill))| QueueUsage {
                    aspect_class,
                    kind,
                    batches,
                    items,
                    mean_fill: fill / batches as f64,
                })
                .collect(),
        }
    }
}

/// Pop the longest FIFO prefix whose temporal lengths sum to at most
/// `t_max`. Skipping ahead is never allowed — items leave in arrival
/// order, so a head item too long for the budget is an error.
pub fn take_batch(queue: &mut VecDeque<LatentItem>, t_max: u64) -> Result<Vec<LatentItem>> {
    if let Some(head) = queue.front() {
        if head.temporal_length > t_max {
            return Err(Error::OversizeItem(format!(
                "item {} needs {} frames but the batch budget is {t_max}",
                head.id, head.temporal_length
            )));
        }
    }
    let mut total = 0u64;
    let mut out = Vec::new();
    while let Some(item) = queue.front() {
        if total + item.temporal_length > t_max {
            break;
        }
        total += item.temporal_length;
        out.push(queue.pop_front().expect("front was just checked"));
    }
    Ok(out)
}

/// How the scheduler picks among aspect classes that have work queued.
#[derive(Debug, Clone, PartialEq)]
pub enum QueuePolicy {
    /// Cycle through classes in sorted order, skipping empty queues.
    RoundRobin,
    /// Smooth weighted rotation: long-run per-class batch shares follow
    /// the weights. Every class that appears in the stream needs a weight.
    Weighted(Vec<(String, f64)>),
}

/// Fixed task-mix ratios for the reference training recipes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMix {
    pub name: &'static str,
    pub text_to_image: f64,
    pub text_to_video: f64,
    pub image_to_video: f64,
}

impl TaskMix {
    /// Fraction of batches that should be image-only under this mix.
    pub fn image_fraction(&self) -> f64 {
        self.text_to_image
    }
}

pub const TASK_MIXES: [TaskMix; 2] = [
    TaskMix {
        name: "video-lite-pretrain",
        text_to_image: 0.01,
        text_to_video: 0.79,
        image_to_video: 0.20,
    },
    TaskMix {
        name: "video-pro-pretrain",
        text_to_image: 0.02,
        text_to_video: 0.77,
        image_to_video: 0.21,
    },
];

pub fn task_mix(name: &str) -> Result<&'static TaskMix> {
    TASK_MIXES.iter().find(|m| m.name == name).ok_or_else(|| {
        Error::Parameter(format!(
            "unknown task mix {name:?}; available: {}",
            TASK_MIXES.map(|m| m.name).join(", ")
        ))
    })
}

/// Aspect-class weights measured from the low-resolution video corpus.
pub fn aspect_weight_preset(name: &str) -> Result<Vec<(String, f64)>> {
    match name {
        "video-lite-lr" => Ok(vec![
            ("1:1".into(), 0.25),
            ("2:3".into(), 0.22),
            ("3:2".into(), 0.53),
        ]),
        _ => Err(Error::Parameter(format!(
            "unknown weight preset {name:?}; available: video-lite-lr"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    /// Temporal budget per batch.
    pub t_max: u64,
    /// Target fraction of batches that are image-only.
    pub image_fraction: f64,
    pub policy: QueuePolicy,
    /// Consecutive unsatisfiable wants tolerated before a starvation
    /// error, counting only kinds the stream never supplied.
    pub patience: u64,
    pub seed: u64,
    /// When set, items outside these aspect classes are rejected instead
    /// of opening new queues.
    pub aspect_classes: Option<Vec<String>>,
}

impl ScheduleConfig {
    pub fn new(t_max: u64, image_fraction: f64, seed: u64) -> Self {
        Self {
            t_max,
            image_fraction,
            policy: QueuePolicy::RoundRobin,
            patience: 100,
            seed,
            aspect_classes: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Parameter("t_max must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.image_fraction) {
            return Err(Error::Parameter(format!(
                "image fraction must lie in [0, 1], got {}",
                self.image_fraction
            )));
        }
        if let QueuePolicy::Weighted(weights) = &self.policy {
            let mut seen = BTreeSet::new();
            for (class, w) in weights {
                if !w.is_finite() || *w <= 0.0 {
                    return Err(Error::Parameter(format!(
                        "weight for class {class:?} must be positive, got {w}"
                    )));
                }
                if !seen.insert(class.clone()) {
                    return Err(Error::Parameter(format!("duplicate weight for class {class:?}")));
                }
            }
            if weights.is_empty() {
                return Err(Error::Parameter("weighted policy needs at least one class".into()));
            }
        }
        Ok(())
    }
}

/// Deterministic fractional interleaver: a running accumulator gains the
/// target fraction per batch and sheds one whenever an image batch is
/// emitted, so image batches land as evenly as arithmetic allows. The
/// seed only shifts the starting phase, never the long-run ratio.
struct Interleaver {
    fraction: f64,
    acc: f64,
}

impl Interleaver {
    fn new(fraction: f64, seed: u64) -> Self {
        let phase = (seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11) as f64 / (1u64 << 53) as f64;
        Self { fraction, acc: phase }
    }

    fn wants_image(&self) -> bool {
        self.acc + self.fraction >= 1.0
    }

    fn commit(&mut self, emitted_image: bool) {
        self.acc += self.fraction;
        if emitted_image {
            self.acc -= 1.0;
        }
    }
}

/// Rotation state shared by both policies, one instance per batch kind.
struct ClassPicker {
    policy: QueuePolicy,
    /// Round-robin cursor: index of the class served last.
    cursor: usize,
    /// Smooth-rotation credits, by class.
    credits: BTreeMap<String, f64>,
}

impl ClassPicker {
    fn new(policy: QueuePolicy) -> Self {
        Self { policy, cursor: usize::MAX, credits: BTreeMap::new() }
    }

    /// Pick one of `classes` (sorted, all with queued work).
    fn pick(&mut self, classes: &[&str], all_classes: &[String]) -> Result<String> {
        match &self.policy {
            QueuePolicy::RoundRobin => {
                // Walk the full class list cyclically from the cursor and
                // take the first class that has work.
                let n = all_classes.len();
                let start = self.cursor.wrapping_add(1);
                for off in 0..n {
                    let idx = (start.wrapping_add(off)) % n;
                    if classes.contains(&all_classes[idx].as_str()) {
                        self.cursor = idx;
                        return Ok(all_classes[idx].clone());
                    }
                }
                unreachable!("pick is only called with at least one non-empty class")
            }
            QueuePolicy::Weighted(weights) => {
                let weight_of = |c: &str| -> Result<f64> {
                    weights
                        .iter()
                        .find(|(name, _)| name == c)
                        .map(|(_, w)| *w)
                        .ok_or_else(|| {
                            Error::Routing(format!("aspect class {c:?} has no configured weight"))
                        })
                };
                let mut active_total = 0.0;
                for &c in classes {
                    let w = weight_of(c)?;
                    *self.credits.entry(c.to_string()).or_insert(0.0) += w;
                    active_total += w;
                }
                let best = classes
                    .iter()
                    .max_by(|&&a, &&b| {
                        self.credits[a].partial_cmp(&self.credits[b]).unwrap().then(b.cmp(a))
                    })
                    .expect("classes is non-empty")
                    .to_string();
                *self.credits.get_mut(&best).unwrap() -= active_total;
                Ok(best)
            }
        }
    }
}

/// Route `items` into per-(aspect, modality) FIFO queues and emit batches
/// until everything is scheduled.
pub fn schedule(items: Vec<LatentItem>, cfg: &ScheduleConfig) -> Result<BatchPlan> {
    cfg.validate()?;
    let strict: Option<BTreeSet<&str>> = cfg
        .aspect_classes
        .as_ref()
        .map(|cs| cs.iter().map(String::as_str).collect());
    let mut queues: BTreeMap<(String, Modality), VecDeque<LatentItem>> = BTreeMap::new();
    let mut supplied_images = false;
    let mut supplied_videos = false;
    for item in items {
        item.validate()?;
        if item.temporal_length > cfg.t_max {
            return Err(Error::OversizeItem(format!(
                "item {} needs {} frames but the batch budget is {}",
                item.id, item.temporal_length, cfg.t_max
            )));
        }
        if let Some(allowed) = &strict {
            if !allowed.contains(item.aspect_class.as_str()) {
                return Err(Error::Routing(format!(
                    "item {} has aspect class {:?}, outside the configured set",
                    item.id, item.aspect_class
                )));
            }
        }
        match item.modality {
            Modality::Image => supplied_images = true,
            Modality::Video => supplied_videos = true,
        }
        queues
            .entry((item.aspect_class.clone(), item.modality))
            .or_default()
            .push_back(item);
    }
    let all_classes: Vec<String> = queues
        .keys()
        .map(|(c, _)| c.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut interleaver = Interleaver::new(cfg.image_fraction, cfg.seed);
    let mut image_picker = ClassPicker::new(cfg.policy.clone());
    let mut video_picker = ClassPicker::new(cfg.policy.clone());
    let mut batches = Vec::new();
    let mut misses = 0u64;

    loop {
        let nonempty = |m: Modality| -> Vec<&str> {
            queues
                .iter()
                .filter(|((_, modality), q)| *modality == m && !q.is_empty())
                .map(|((c, _), _)| c.as_str())
                .collect()
        };
        let image_classes: Vec<&str> = nonempty(Modality::Image);
        let video_classes: Vec<&str> = nonempty(Modality::Video);
        if image_classes.is_empty() && video_classes.is_empty() {
            break;
        }
        let want_image = interleaver.wants_image();
        // Take the wanted kind when it has items; otherwise fall back to
        // the other kind (at least one of the two is non-empty here).
        let take_image =
            if want_image { !image_classes.is_empty() } else { video_classes.is_empty() };
        let (modality, classes) = if take_image {
            (Modality::Image, image_classes)
        } else {
            (Modality::Video, video_classes)
        };
        let satisfied = (modality == Modality::Image) == want_image;
        if satisfied {
            misses = 0;
        } else {
            let wanted_was_supplied = if want_image { supplied_images } else { supplied_videos };
            if !wanted_was_supplied {
                misses += 1;
                if misses > cfg.patience {
                    let wanted = if want_image { "image" } else { "video" };
                    return Err(Error::Starvation(format!(
                        "wanted a {wanted} batch {misses} times in a row but the stream \
                         never supplied any {wanted} items"
                    )));
                }
            }
        }
        let classes: Vec<&str> = classes;
        let picker = match modality {
            Modality::Image => &mut image_picker,
            Modality::Video => &mut video_picker,
        };
        let class = picker.pick(&classes, &all_classes)?;
        let queue = queues
            .get_mut(&(class.clone(), modality))
            .expect("picked class has a queue");
        let taken = take_batch(queue, cfg.t_max)?;
        debug_assert!(!taken.is_empty(), "non-empty queues always yield a batch");
        let total_temporal = taken.iter().map(|i| i.temporal_length).sum();
        batches.push(Batch {
            kind: modality.batch_kind(),
            aspect_class: class,
            item_ids: taken.into_iter().map(|i| i.id).collect(),
            total_temporal,
        });
        interleaver.commit(modality == Modality::Image);
    }

    Ok(BatchPlan {
        t_max: cfg.t_max,
        target_image_fraction: cfg.image_fraction,
        seed: cfg.seed,
        batches,
    })
}

/// Shard capacity by content kind: denser media pack more items per
/// archive.
pub fn tar_capacity(modality: Modality, resolution: ResolutionClass) -> u64 {
    match (modality, resolution) {
        (Modality::Image, ResolutionClass::Low) => 1024,
        (Modality::Image, ResolutionClass::Medium) => 256,
        (Modality::Image, ResolutionClass::High) => 64,
        (Modality::Video, ResolutionClass::Low) => 16,
        (Modality::Video, ResolutionClass::Medium) => 4,
        (Modality::Video, ResolutionClass::High) => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TarArchive {
    pub modality: Modality,
    pub resolution_class: ResolutionClass,
    pub item_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TarPackPlan {
    pub archives: Vec<TarArchive>,
}

/// Group items by (modality, resolution class) and cut each group into
/// capacity-sized archives, preserving arrival order inside a group.
pub fn plan_tar_packing(items: &[LatentItem]) -> Result<TarPackPlan> {
    let mut groups: BTreeMap<(Modality, ResolutionClass), Vec<&LatentItem>> = BTreeMap::new();
    for item in items {
        item.validate()?;
        groups.entry((item.modality, item.resolution_class)).or_default().push(item);
    }
    let mut archives = Vec::new();
    for ((modality, resolution), members) in groups {
        let cap = tar_capacity(modality, resolution) as usize;
        for chunk in members.chunks(cap) {
            archives.push(TarArchive {
                modality,
                resolution_class: resolution,
                item_ids: chunk.iter().map(|i| i.id.clone()).collect(),
            });
        }
    }
    Ok(TarPackPlan { archives })
}
