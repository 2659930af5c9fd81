use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Default number of flat joint channels per frame.
pub const DEFAULT_JOINTS: usize = 75;
/// Frame rate written into generated sequences.
pub const DEFAULT_FRAME_RATE: u16 = 30;
/// Number of registered procedural action generators (class ids `0..N`).
pub const NUM_GENERATORS: usize = 16;
/// Standard deviation of the additive per-value noise.
pub const NOISE_STD: f64 = 0.01;

/// `T x J` joint values, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Vec<f32>,
    num_frames: usize,
    joints: usize,
    frame_rate: u16,
}

impl MotionSequence {
    pub fn new(num_frames: usize, joints: usize, frames: Vec<f32>, frame_rate: u16) -> Result<Self> {
        if num_frames == 0 || joints == 0 {
            return Err(Error::Shape(format!(
                "motion sequence needs T >= 1 and J >= 1, got {num_frames}x{joints}"
            )));
        }
        if frames.len() != num_frames * joints {
            return Err(Error::Shape(format!(
                "{} values for a {num_frames}x{joints} sequence",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "motion sequence contains non-finite values".into(),
            ));
        }
        Ok(Self {
            frames,
            num_frames,
            joints,
            frame_rate,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frame_rate(&self) -> u16 {
        self.frame_rate
    }

    pub fn values(&self) -> &[f32] {
        &self.frames
    }

    /// Frame `t` (0-based).
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.joints..(t + 1) * self.joints]
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        self.frames
            .iter()
            .zip(&other.frames)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Inclusive 1-based frame interval with a class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionSegment {
    pub begin: usize,
    pub end: usize,
    pub label: usize,
}

impl ActionSegment {
    pub fn new(begin: usize, end: usize, label: usize) -> Self {
        Self { begin, end, label }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.begin
    }
}

/// A sequence plus its sorted, non-overlapping action segments.
/// Frames outside every segment are background.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSequence {
    pub sequence: MotionSequence,
    pub segments: Vec<ActionSegment>,
}

impl AnnotatedSequence {
    pub fn new(sequence: MotionSequence, segments: Vec<ActionSegment>) -> Result<Self> {
        validate_segments(&segments, sequence.num_frames())?;
        Ok(Self { sequence, segments })
    }

    pub fn num_frames(&self) -> usize {
        self.sequence.num_frames()
    }

    /// Per-frame labels (0-based frames); uncovered frames get `background`.
    pub fn frame_labels(&self, background: usize) -> Vec<usize> {
        let mut labels = vec![background; self.num_frames()];
        for s in &self.segments {
            labels[s.begin - 1..s.end].iter_mut().for_each(|l| *l = s.label);
        }
        labels
    }

    /// Maximal background runs, as segments labeled `background`.
    pub fn background_segments(&self, background: usize) -> Vec<ActionSegment> {
        let mut out = Vec::new();
        let mut next = 1;
        for s in &self.segments {
            if s.begin > next {
                out.push(ActionSegment::new(next, s.begin - 1, background));
            }
            next = s.end + 1;
        }
        if next <= self.num_frames() {
            out.push(ActionSegment::new(next, self.num_frames(), background));
        }
        out
    }
}

/// Sorted by begin, `1 <= begin <= end <= num_frames`, no overlaps.
pub fn validate_segments(segments: &[ActionSegment], num_frames: usize) -> Result<()> {
    let mut prev_end = 0;
    for s in segments {
        if s.begin < 1 || s.end < s.begin || s.end > num_frames {
            return Err(Error::Annotation(format!(
                "segment ({}, {}) invalid for a {num_frames}-frame sequence",
                s.begin, s.end
            )));
        }
        if s.begin <= prev_end {
            return Err(Error::Annotation(format!(
                "segment ({}, {}) overlaps or precedes the previous segment ending at {prev_end}",
                s.begin, s.end
            )));
        }
        prev_end = s.end;
    }
    Ok(())
}

/// Per-joint trajectory of one registered action class.
#[derive(Debug, Clone)]
struct JointFlow {
    offset: f64,
    amplitude: f64,
    freq: f64,
    phase: f64,
    harmonic: f64,
    harmonic_phase: f64,
}

fn class_flow(class_id: usize, joints: usize) -> Vec<JointFlow> {
    // Class parameters come from a fixed per-class stream, independent of the clip seed.
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1D5_0000 ^ (class_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let base_freq = 0.4 + 0.15 * class_id as f64 + rng.random_range(0.0..0.1);
    let coupling = rng.random_range(0.0..TAU);
    (0..joints)
        .map(|j| {
            let group = j % 3;
            let mult = [1.0, 1.5, 2.0][rng.random_range(0..3)];
            JointFlow {
                offset: rng.random_range(-0.5..0.5),
                amplitude: rng.random_range(0.2..1.0),
                freq: base_freq * mult,
                phase: coupling * group as f64 + rng.random_range(-0.3..0.3),
                harmonic: rng.random_range(0.0..0.4),
                harmonic_phase: rng.random_range(0.0..TAU),
            }
        })
        .collect()
}

/// Procedural clip of one action class: class-specific sinusoidal joint
/// trajectories with seeded clip-level jitter and additive noise.
pub fn generate_action_clip(class_id: usize, duration: usize, joints: usize, seed: u64) -> Result<MotionSequence> {
    if class_id >= NUM_GENERATORS {
        return Err(Error::InvalidArgument(format!(
            "unknown action class {class_id}; registered generators are 0..{NUM_GENERATORS}"
        )));
    }
    if duration < 1 {
        return Err(Error::InvalidArgument(
            "clip duration must be at least one frame".into(),
        ));
    }
    if joints < 1 {
        return Err(Error::InvalidArgument("clip needs at least one joint".into()));
    }
    let flow = class_flow(class_id, joints);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let time_shift = rng.random_range(0.0..1.0);
    let amp_scale = rng.random_range(0.9..1.1);
    let freq_scale = rng.random_range(0.95..1.05);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let fps = DEFAULT_FRAME_RATE as f64;
    let mut frames = Vec::with_capacity(duration * joints);
    for t in 0..duration {
        let time = t as f64 / fps + time_shift;
        for jf in &flow {
            let arg = TAU * jf.freq * freq_scale * time + jf.phase;
            let v = jf.offset
                + amp_scale * jf.amplitude * (arg.sin() + jf.harmonic * (2.0 * arg + jf.harmonic_phase).sin())
                + noise.sample(&mut rng);
            frames.push(v as f32);
        }
    }
    MotionSequence::new(duration, joints, frames, DEFAULT_FRAME_RATE)
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Concatenates one clip per class with linear cross-fades of
/// `transition_len` frames between consecutive clips. Cross-fade frames are
/// background; each clip becomes one segment.
pub fn synthesize_sequence(
    class_list: &[usize],
    durations: &[usize],
    transition_len: usize,
    joints: usize,
    seed: u64,
) -> Result<AnnotatedSequence> {
    if class_list.is_empty() {
        return Err(Error::InvalidArgument("class list is empty".into()));
    }
    if class_list.len() != durations.len() {
        return Err(Error::InvalidArgument(format!(
            "{} classes but {} durations",
            class_list.len(),
            durations.len()
        )));
    }
    let clips = class_list
        .iter()
        .zip(durations)
        .enumerate()
        .map(|(i, (&c, &d))| generate_action_clip(c, d, joints, mix_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let total = durations.iter().sum::<usize>() + transition_len * (clips.len() - 1);
    let mut frames = Vec::with_capacity(total * joints);
    let mut segments = Vec::with_capacity(clips.len());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    for (i, clip) in clips.iter().enumerate() {
        if i > 0 {
            let from = clips[i - 1].frame(clips[i - 1].num_frames() - 1);
            let to = clip.frame(0);
            for k in 1..=transition_len {
                let alpha = k as f64 / (transition_len + 1) as f64;
                for j in 0..joints {
                    let v = (1.0 - alpha) * from[j] as f64 + alpha * to[j] as f64 + noise.sample(&mut noise_rng);
                    frames.push(v as f32);
                }
            }
        }
        let begin = frames.len() / joints + 1;
        frames.extend_from_slice(clip.values());
        segments.push(ActionSegment::new(begin, begin + clip.num_frames() - 1, class_list[i]));
    }
    let sequence = MotionSequence::new(total, joints, frames, DEFAULT_FRAME_RATE)?;
    AnnotatedSequence::new(sequence, segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_frame_clip_is_deterministic() {
        let a = generate_action_clip(0, 1, 6, 7).unwrap();
        let b = generate_action_clip(0, 1, 6, 7).unwrap();
        assert_eq!(a.num_frames(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn classes_are_separated() {
        let a = generate_action_clip(0, 30, 6, 7).unwrap();
        let b = generate_action_clip(1, 30, 6, 7).unwrap();
        assert!(a.frobenius_distance(&b) > 0.0);
        let mean_frame_dist: f64 = (0..30)
            .map(|t| {
                a.frame(t)
                    .iter()
                    .zip(b.frame(t))
                    .map(|(x, y)| ((x - y) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 30.0;
        assert!(mean_frame_dist > 0.0);
    }

    #[test]
    fn full_size_clip_is_bit_identical_across_runs() {
        let a = generate_action_clip(2, 60, 75, 13).unwrap();
        let b = generate_action_clip(2, 60, 75, 13).unwrap();
        let bits = |s: &MotionSequence| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn clip_errors() {
        assert!(generate_action_clip(NUM_GENERATORS, 10, 6, 0).is_err());
        assert!(generate_action_clip(0, 0, 6, 0).is_err());
    }

    #[test]
    fn single_clip_has_no_background() {
        let s = synthesize_sequence(&[0], &[40], 0, 6, 1).unwrap();
        assert_eq!(s.num_frames(), 40);
        assert_eq!(s.segments, vec![ActionSegment::new(1, 40, 0)]);
        assert!(s.background_segments(99).is_empty());
    }

    #[test]
    fn two_clips_with_transition_layout() {
        let s = synthesize_sequence(&[0, 1], &[40, 40], 10, 6, 1).unwrap();
        assert_eq!(s.num_frames(), 90);
        assert_eq!(
            s.segments,
            vec![ActionSegment::new(1, 40, 0), ActionSegment::new(51, 90, 1)]
        );
        assert_eq!(s.background_segments(4), vec![ActionSegment::new(41, 50, 4)]);
    }

    #[test]
    fn three_clips_cover_ninety_of_hundred_frames() {
        let s = synthesize_sequence(&[0, 1, 2], &[30, 30, 30], 5, 6, 9).unwrap();
        assert_eq!(s.num_frames(), 100);
        let covered: usize = s.segments.iter().map(ActionSegment::len).sum();
        assert_eq!(covered, 90);
    }

    #[test]
    fn empty_class_list_is_rejected() {
        assert!(synthesize_sequence(&[], &[], 0, 6, 1).is_err());
    }

    #[test]
    fn overlapping_segments_are_rejected() {
        let seq = MotionSequence::new(10, 1, vec![0.0; 10], 30).unwrap();
        let segs = vec![ActionSegment::new(1, 5, 0), ActionSegment::new(5, 8, 1)];
        assert!(AnnotatedSequence::new(seq.clone(), segs).is_err());
        let segs = vec![ActionSegment::new(3, 2, 0)];
        assert!(AnnotatedSequence::new(seq, segs).is_err());
    }

    proptest! {
        #[test]
        fn segments_and_background_tile_the_sequence(
            classes in proptest::collection::vec(0usize..NUM_GENERATORS, 1..5),
            dur in 1usize..20,
            transition in 0usize..6,
            seed in any::<u64>(),
        ) {
            let durations = vec![dur; classes.len()];
            let s = synthesize_sequence(&classes, &durations, transition, 3, seed).unwrap();
            let mut covered = vec![0u8; s.num_frames()];
            for seg in s.segments.iter().chain(s.background_segments(usize::MAX).iter()) {
                for t in seg.begin..=seg.end {
                    covered[t - 1] += 1;
                }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
            let bg: usize = s.background_segments(usize::MAX).iter().map(ActionSegment::len).sum();
            prop_assert_eq!(bg, transition * (classes.len() - 1));
        }
    }
}
