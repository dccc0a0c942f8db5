//! Detection cascade and temporal aggregation.
//!
//! Per frame: VAE gate, then the 9-class classifier with threshold
//! acceptance, then the scene-class filter, and card frames refined to
//! yellow/red. Verdicts feed a sliding majority vote over a 15-frame window
//! and a per-kind deduplication pass that keeps the earliest occurrence
//! within the repeat window.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::finegrain::{CardColor, FinegrainModel};
use crate::labels::{is_scene_class, EventKind, NineClassView};
use crate::nn::{NnError, Tensor};
use crate::synth::resize_nearest;
use crate::vae::VaeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    RejectedVae { loss: f64 },
    RejectedScene { class: NineClassView },
    RejectedLowConfidence { top_prob: f64 },
    Event { kind: EventKind, confidence: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameVerdict {
    pub frame_index: usize,
    #[serde(flatten)]
    pub outcome: Outcome,
}

/// A majority-vote hit: one full window tagged with an event kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTag {
    pub kind: EventKind,
    pub center_frame: usize,
    pub first_frame: usize,
    pub last_frame: usize,
    /// Mean confidence of the voting frames.
    pub confidence_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOccurrence {
    pub kind: EventKind,
    pub first_frame: usize,
    pub last_frame: usize,
    pub timestamp_s: f64,
    pub confidence_mean: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub fps: f64,
    /// Sliding vote window in frames; must be odd.
    pub window: usize,
    /// Minimum per-kind frame count in a window to emit a tag.
    pub majority: usize,
    /// Per-kind repeat suppression window in seconds.
    pub dedup_window_s: f64,
    pub vae_threshold: f64,
    pub softmax_tau: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fps: 30.0,
            window: 15,
            majority: 8,
            dedup_window_s: 10.0,
            vae_threshold: f64::INFINITY,
            softmax_tau: 0.9,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.fps > 0.0) {
            return Err(NnError::Invalid("fps must be positive".into()));
        }
        if self.window % 2 == 0 || self.window == 0 {
            return Err(NnError::Invalid(format!("window {} must be odd", self.window)));
        }
        if 2 * self.majority <= self.window {
            return Err(NnError::Invalid(format!(
                "majority {} must exceed half the window {}",
                self.majority, self.window
            )));
        }
        if !(self.dedup_window_s > 0.0) || !(self.vae_threshold > 0.0) || !(self.softmax_tau > 0.0) {
            return Err(NnError::Invalid("thresholds must be positive".into()));
        }
        Ok(())
    }

    pub fn half_window(&self) -> usize {
        self.window / 2
    }
}

pub struct PipelineModels {
    pub vae: VaeModel,
    pub classifier: Classifier,
    pub finegrain: FinegrainModel,
}

impl PipelineModels {
    /// The classifier must carry exactly the 9 merged class names in order.
    pub fn validate(&self) -> Result<(), NnError> {
        let expected: Vec<&str> = NineClassView::ALL.iter().map(|c| c.name()).collect();
        let actual: Vec<&str> = self.classifier.cfg.class_names.iter().map(|s| s.as_str()).collect();
        if actual != expected {
            return Err(NnError::Invalid(format!(
                "classifier classes {:?} do not match the 9-class view",
                actual
            )));
        }
        Ok(())
    }
}

/// Run one frame through the cascade: gate, classify, scene filter, card
/// refinement. The frame is resized to each model's input resolution.
pub fn process_frame(
    image: &Tensor,
    frame_index: usize,
    models: &PipelineModels,
    cfg: &PipelineConfig,
) -> Result<FrameVerdict, NnError> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(NnError::ShapeMismatch {
            expected: "[3,H,W]".into(),
            actual: format!("{:?}", image.shape()),
        });
    }
    let gate_input = resize_nearest(image, models.vae.cfg.input_size);
    let loss = models.vae.image_loss(&gate_input)?;
    if loss > cfg.vae_threshold {
        return Ok(FrameVerdict { frame_index, outcome: Outcome::RejectedVae { loss } });
    }
    let clf_input = resize_nearest(image, models.classifier.cfg.input_size);
    let verdict = models.classifier.classify_with_threshold(&clf_input, cfg.softmax_tau)?;
    let accepted = match verdict.accepted {
        None => {
            let (_, p) = verdict.top();
            return Ok(FrameVerdict { frame_index, outcome: Outcome::RejectedLowConfidence { top_prob: p } });
        }
        Some(i) => NineClassView::from_index(i)
            .ok_or_else(|| NnError::Invalid(format!("class index {} out of range", i)))?,
    };
    if is_scene_class(accepted) {
        return Ok(FrameVerdict { frame_index, outcome: Outcome::RejectedScene { class: accepted } });
    }
    let (kind, confidence) = match accepted {
        NineClassView::Card => {
            let fg_input = resize_nearest(image, models.finegrain.cfg.input_size);
            let card = models.finegrain.classify_card(&fg_input)?;
            let kind = match card.color {
                CardColor::Yellow => EventKind::YellowCard,
                CardColor::Red => EventKind::RedCard,
            };
            (kind, card.confidence)
        }
        NineClassView::PenaltyKick => (EventKind::PenaltyKick, verdict.top().1),
        NineClassView::CornerKick => (EventKind::CornerKick, verdict.top().1),
        NineClassView::FreeKick => (EventKind::FreeKick, verdict.top().1),
        NineClassView::Tackle => (EventKind::Tackle, verdict.top().1),
        NineClassView::ToSubstitute => (EventKind::ToSubstitute, verdict.top().1),
        _ => unreachable!("scene classes filtered above"),
    };
    Ok(FrameVerdict { frame_index, outcome: Outcome::Event { kind, confidence } })
}

/// Majority vote at one position of an ordered verdict slice. Returns a tag
/// when some kind holds at least `majority` of the window; positions without
/// full context yield nothing.
pub fn window_vote(verdicts: &[FrameVerdict], center: usize, cfg: &PipelineConfig) -> Option<EventTag> {
    let half = cfg.half_window();
    if center < half || center + half >= verdicts.len() {
        return None;
    }
    let mut counts: BTreeMap<EventKind, (usize, f64)> = BTreeMap::new();
    for v in &verdicts[center - half..=center + half] {
        if let Outcome::Event { kind, confidence } = v.outcome {
            let e = counts.entry(kind).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += confidence;
        }
    }
    let (&kind, &(count, conf_sum)) = counts.iter().max_by_key(|(_, (c, _))| *c)?;
    if count < cfg.majority {
        return None;
    }
    Some(EventTag {
        kind,
        center_frame: verdicts[center].frame_index,
        first_frame: verdicts[center - half].frame_index,
        last_frame: verdicts[center + half].frame_index,
        confidence_mean: conf_sum / count as f64,
    })
}

/// Per-kind repeat suppression: a tag becomes an occurrence only when no
/// occurrence of the same kind was emitted less than `dedup_window_s`
/// earlier. Later overlapping tags collapse into the earliest occurrence.
pub fn dedup(tags: &[EventTag], cfg: &PipelineConfig) -> Vec<EventOccurrence> {
    let mut last_emitted: BTreeMap<EventKind, f64> = BTreeMap::new();
    let mut out = Vec::new();
    for tag in tags {
        let ts = tag.center_frame as f64 / cfg.fps;
        if let Some(&prev) = last_emitted.get(&tag.kind) {
            if ts - prev < cfg.dedup_window_s {
                continue;
            }
        }
        last_emitted.insert(tag.kind, ts);
        out.push(EventOccurrence {
            kind: tag.kind,
            first_frame: tag.first_frame,
            last_frame: tag.last_frame,
            timestamp_s: ts,
            confidence_mean: tag.confidence_mean,
        });
    }
    out
}

/// Vote at every in-context position, then deduplicate.
pub fn aggregate(verdicts: &[FrameVerdict], cfg: &PipelineConfig) -> (Vec<EventTag>, Vec<EventOccurrence>) {
    let tags: Vec<EventTag> =
        (0..verdicts.len()).filter_map(|c| window_vote(verdicts, c, cfg)).collect();
    let occurrences = dedup(&tags, cfg);
    (tags, occurrences)
}

#[derive(Debug, Clone)]
pub struct DetectionRun {
    pub verdicts: Vec<FrameVerdict>,
    pub tags: Vec<EventTag>,
    pub occurrences: Vec<EventOccurrence>,
}

/// Parse `frames.txt` (`index<TAB>timestamp_s` per line); indices must be
/// strictly increasing.
pub fn read_frames_manifest(path: &Path) -> Result<Vec<(usize, f64)>, NnError> {
    let text = fs::read_to_string(path)?;
    let mut out: Vec<(usize, f64)> = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = || NnError::Invalid(format!("bad frames manifest line: {}", line));
        if parts.len() != 2 {
            return Err(bad());
        }
        let index: usize = parts[0].parse().map_err(|_| bad())?;
        let ts: f64 = parts[1].parse().map_err(|_| bad())?;
        if let Some(&(prev, _)) = out.last() {
            if index <= prev {
                return Err(NnError::Invalid(format!(
                    "frame index {} not strictly increasing after {}",
                    index, prev
                )));
            }
        }
        out.push((index, ts));
    }
    Ok(out)
}

/// Run the full cascade over a frame directory (`frame_%08d.png` plus
/// `frames.txt`).
pub fn run_detection(
    frames_dir: &Path,
    models: &PipelineModels,
    cfg: &PipelineConfig,
) -> Result<DetectionRun, NnError> {
    cfg.validate()?;
    models.validate()?;
    let manifest = read_frames_manifest(&frames_dir.join("frames.txt"))?;
    let mut verdicts = Vec::with_capacity(manifest.len());
    for &(index, _) in &manifest {
        let path = frames_dir.join(format!("frame_{:08}.png", index));
        let image = crate::synth::load_png(&path)
            .map_err(|e| NnError::Invalid(format!("frame load failed: {}", e)))?;
        verdicts.push(process_frame(&image, index, models, cfg)?);
    }
    let (tags, occurrences) = aggregate(&verdicts, cfg);
    Ok(DetectionRun { verdicts, tags, occurrences })
}

// ---------------------------------------------------------------------------
// log io
// ---------------------------------------------------------------------------

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), NnError> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| NnError::Invalid(e.to_string()))?;
        writeln!(f, "{}", line)?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, NnError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| NnError::Invalid(e.to_string())))
        .collect()
}

pub fn write_event_log(path: &Path, occurrences: &[EventOccurrence]) -> Result<(), NnError> {
    write_jsonl(path, occurrences)
}

pub fn read_event_log(path: &Path) -> Result<Vec<EventOccurrence>, NnError> {
    read_jsonl(path)
}

pub fn write_trace(path: &Path, verdicts: &[FrameVerdict]) -> Result<(), NnError> {
    write_jsonl(path, verdicts)
}

pub fn read_trace(path: &Path) -> Result<Vec<FrameVerdict>, NnError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> PipelineConfig {
        PipelineConfig { vae_threshold: 100.0, ..PipelineConfig::default() }
    }

    fn ev(i: usize, kind: EventKind) -> FrameVerdict {
        FrameVerdict { frame_index: i, outcome: Outcome::Event { kind, confidence: 0.95 } }
    }

    fn rej(i: usize) -> FrameVerdict {
        FrameVerdict { frame_index: i, outcome: Outcome::RejectedVae { loss: 500.0 } }
    }

    fn seq(pattern: &[Option<EventKind>]) -> Vec<FrameVerdict> {
        pattern
            .iter()
            .enumerate()
            .map(|(i, k)| match k {
                Some(kind) => ev(i, *kind),
                None => rej(i),
            })
            .collect()
    }

    #[test]
    fn eight_of_fifteen_tags_seven_does_not() {
        let c = cfg();
        let mut p = vec![None; 15];
        for slot in p.iter_mut().take(8) {
            *slot = Some(EventKind::CornerKick);
        }
        let v = seq(&p);
        let tag = window_vote(&v, 7, &c).unwrap();
        assert_eq!(tag.kind, EventKind::CornerKick);
        assert_eq!((tag.first_frame, tag.last_frame), (0, 14));

        let mut p7 = vec![None; 15];
        for slot in p7.iter_mut().take(7) {
            *slot = Some(EventKind::CornerKick);
        }
        assert!(window_vote(&seq(&p7), 7, &c).is_none());
    }

    #[test]
    fn all_rejections_yield_no_tag() {
        let v: Vec<FrameVerdict> = (0..15).map(rej).collect();
        assert!(window_vote(&v, 7, &cfg()).is_none());
    }

    #[test]
    fn edges_without_context_yield_no_tag() {
        let v = seq(&vec![Some(EventKind::Tackle); 20]);
        let c = cfg();
        assert!(window_vote(&v, 6, &c).is_none());
        assert!(window_vote(&v, 13, &c).is_none());
        assert!(window_vote(&v, 7, &c).is_some());
        assert!(window_vote(&v, 12, &c).is_some());
    }

    #[test]
    fn dedup_keeps_earliest_within_window() {
        let c = cfg();
        let tag = |center: usize, kind: EventKind| EventTag {
            kind,
            center_frame: center,
            first_frame: center - 7,
            last_frame: center + 7,
            confidence_mean: 0.9,
        };
        // 3 s apart at 30 fps: 90 frames
        let tags = vec![tag(100, EventKind::CornerKick), tag(190, EventKind::CornerKick)];
        let occ = dedup(&tags, &c);
        assert_eq!(occ.len(), 1);
        assert_eq!(occ[0].first_frame, 93);

        // 12 s apart: both kept
        let tags = vec![tag(100, EventKind::CornerKick), tag(460, EventKind::CornerKick)];
        assert_eq!(dedup(&tags, &c).len(), 2);

        // different kinds 1 s apart: both kept
        let tags = vec![tag(100, EventKind::CornerKick), tag(130, EventKind::FreeKick)];
        assert_eq!(dedup(&tags, &c).len(), 2);
    }

    #[test]
    fn dedup_boundary_is_closed_under_the_window() {
        let c = cfg();
        let tag = |center: usize| EventTag {
            kind: EventKind::Tackle,
            center_frame: center,
            first_frame: center,
            last_frame: center,
            confidence_mean: 0.9,
        };
        // exactly 10 s apart (300 frames at 30 fps) is allowed again
        assert_eq!(dedup(&[tag(0), tag(300)], &c).len(), 2);
        assert_eq!(dedup(&[tag(0), tag(299)], &c).len(), 1);
    }

    #[test]
    fn occurrences_respect_min_spacing_per_kind() {
        let c = cfg();
        let mut p = Vec::new();
        for _ in 0..5 {
            p.extend(vec![Some(EventKind::ToSubstitute); 20]);
            p.extend(vec![None; 30]);
        }
        let (_, occ) = aggregate(&seq(&p), &c);
        for pair in occ.windows(2) {
            if pair[0].kind == pair[1].kind {
                assert!(pair[1].timestamp_s - pair[0].timestamp_s >= c.dedup_window_s);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(PipelineConfig { window: 14, ..cfg() }.validate().is_err());
        assert!(PipelineConfig { majority: 7, ..cfg() }.validate().is_err());
        assert!(PipelineConfig { fps: 0.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn frames_manifest_rejects_disorder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.txt");
        fs::write(&path, "0\t0.0\n2\t0.066\n1\t0.033\n").unwrap();
        assert!(read_frames_manifest(&path).is_err());
        fs::write(&path, "0\t0.0\n1\t0.033\n5\t0.166\n").unwrap();
        assert_eq!(read_frames_manifest(&path).unwrap().len(), 3);
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let occ = vec![EventOccurrence {
            kind: EventKind::RedCard,
            first_frame: 10,
            last_frame: 24,
            timestamp_s: 0.5666,
            confidence_mean: 0.91,
        }];
        let path = dir.path().join("events.jsonl");
        write_event_log(&path, &occ).unwrap();
        assert_eq!(read_event_log(&path).unwrap(), occ);

        let verdicts = vec![
            rej(0),
            FrameVerdict {
                frame_index: 1,
                outcome: Outcome::RejectedScene { class: NineClassView::CenterCircle },
            },
            FrameVerdict { frame_index: 2, outcome: Outcome::RejectedLowConfidence { top_prob: 0.4 } },
            ev(3, EventKind::YellowCard),
        ];
        let tpath = dir.path().join("trace.jsonl");
        write_trace(&tpath, &verdicts).unwrap();
        assert_eq!(read_trace(&tpath).unwrap(), verdicts);
    }

    // brute-force references for the property tests

    fn brute_force_tags(verdicts: &[FrameVerdict], c: &PipelineConfig) -> Vec<EventTag> {
        let half = c.half_window();
        let mut tags = Vec::new();
        for center in 0..verdicts.len() {
            if center < half || center + half >= verdicts.len() {
                continue;
            }
            let mut best: Option<(EventKind, usize, f64)> = None;
            for kind in EventKind::ALL {
                let mut count = 0;
                let mut conf = 0.0;
                for v in &verdicts[center - half..=center + half] {
                    if let Outcome::Event { kind: k, confidence } = v.outcome {
                        if k == kind {
                            count += 1;
                            conf += confidence;
                        }
                    }
                }
                if count > 0 && best.map_or(true, |(_, c0, _)| count > c0) {
                    best = Some((kind, count, conf));
                }
            }
            if let Some((kind, count, conf)) = best {
                if count >= c.majority {
                    tags.push(EventTag {
                        kind,
                        center_frame: verdicts[center].frame_index,
                        first_frame: verdicts[center - half].frame_index,
                        last_frame: verdicts[center + half].frame_index,
                        confidence_mean: conf / count as f64,
                    });
                }
            }
        }
        tags
    }

    fn brute_force_dedup(tags: &[EventTag], c: &PipelineConfig) -> Vec<EventOccurrence> {
        let mut occ: Vec<EventOccurrence> = Vec::new();
        for tag in tags {
            let ts = tag.center_frame as f64 / c.fps;
            let blocked = occ
                .iter()
                .any(|o| o.kind == tag.kind && ts - o.timestamp_s < c.dedup_window_s);
            if !blocked {
                occ.push(EventOccurrence {
                    kind: tag.kind,
                    first_frame: tag.first_frame,
                    last_frame: tag.last_frame,
                    timestamp_s: ts,
                    confidence_mean: tag.confidence_mean,
                });
            }
        }
        occ
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(250))]
        #[test]
        fn aggregate_matches_brute_force(
            pattern in proptest::collection::vec(0usize..9, 0..200),
        ) {
            let verdicts: Vec<FrameVerdict> = pattern
                .iter()
                .enumerate()
                .map(|(i, &p)| match p {
                    0 => rej(i),
                    1 => FrameVerdict {
                        frame_index: i,
                        outcome: Outcome::RejectedLowConfidence { top_prob: 0.5 },
                    },
                    k => ev(i, EventKind::ALL[(k - 2) % 7]),
                })
                .collect();
            let c = cfg();
            let (tags, occ) = aggregate(&verdicts, &c);
            prop_assert_eq!(&tags, &brute_force_tags(&verdicts, &c));
            prop_assert_eq!(&occ, &brute_force_dedup(&tags, &c));
        }
    }

    #[test]
    fn aggregate_matches_brute_force_on_bursty_sequences() {
        // bursty runs exercise the vote boundary more than uniform noise
        let mut rng = crate::nn::rng::rng_for(15, &[0]);
        let c = cfg();
        for _ in 0..750 {
            let len = rng.gen_range(0..200);
            let mut pattern: Vec<Option<EventKind>> = Vec::with_capacity(len);
            while pattern.len() < len {
                let run = rng.gen_range(1..20).min(len - pattern.len());
                let kind = if rng.gen_bool(0.5) {
                    None
                } else {
                    Some(EventKind::ALL[rng.gen_range(0..7)])
                };
                pattern.extend(std::iter::repeat(kind).take(run));
            }
            let verdicts = seq(&pattern);
            let (tags, occ) = aggregate(&verdicts, &c);
            assert_eq!(tags, brute_force_tags(&verdicts, &c));
            assert_eq!(occ, brute_force_dedup(&tags, &c));
        }
    }
}
