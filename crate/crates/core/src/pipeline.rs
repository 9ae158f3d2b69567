//! Storyboards and interleaved text/video token sequences.
//!
//! A storyboard (prompt Format 3) is a list of scenes delimited by literal
//! `<scene start>` / `<scene end>` marker lines, each scene holding one or
//! more blank-line-separated paragraphs — one paragraph per 3-second video
//! segment. Assembly emits, per segment, its text tokens followed by its
//! video tokens; adjacent segments share `overlap_frames` of video, stored
//! once in the flat sequence and dual-mapped by the attention mask.
//!
//! Prompt Formats 1 and 2 are recognized as free text (Format 2 may carry
//! scene-label hints) but only Format 3 can be assembled.

use std::ops::Range;

use crate::baselines::AttentionMask;
use crate::error::{Error, Result};

pub const SCENE_START: &str = "<scene start>";
pub const SCENE_END: &str = "<scene end>";

/// First token id of the placeholder video-token range; ids below it are the
/// byte-level text vocabulary plus specials.
pub const VIDEO_TOKEN_BASE: u32 = 512;

/// Learned null token substituted for dropped-out text prompts.
pub const NULL_TOKEN: u32 = 256;

// ----- storyboard --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    /// Raw paragraph text, one entry per segment.
    pub paragraphs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Storyboard {
    pub scenes: Vec<Scene>,
}

impl Storyboard {
    pub fn total_segments(&self) -> usize {
        self.scenes.iter().map(|s| s.paragraphs.len()).sum()
    }

    /// Canonical Format-3 text. `parse(serialize(parse(t)))` is a fixed point.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for scene in &self.scenes {
            out.push_str(SCENE_START);
            out.push('\n');
            for (i, p) in scene.paragraphs.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                out.push_str(p);
                out.push('\n');
            }
            out.push_str(SCENE_END);
            out.push('\n');
        }
        out
    }
}

/// A parsed prompt: a strict Format-3 storyboard, or free text (Formats 1/2)
/// with any scene-label hints it carried.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prompt {
    Storyboard(Storyboard),
    FreeText { paragraphs: Vec<String>, scene_hints: Vec<String> },
}

/// Strict Format-3 parser. Markers must sit on their own lines, alternate
/// start/end, and enclose all text; paragraphs are blank-line-separated.
pub fn parse_storyboard(text: &str) -> Result<Storyboard> {
    let mut scenes: Vec<Scene> = Vec::new();
    let mut open: Option<(usize, Vec<String>, String)> = None; // (line, paragraphs, current)

    let flush_para = |paragraphs: &mut Vec<String>, current: &mut String| {
        let trimmed = current.trim();
        if !trimmed.is_empty() {
            paragraphs.push(trimmed.to_string());
        }
        current.clear();
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        match line {
            SCENE_START => match open {
                Some((opened_at, _, _)) => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!(
                            "nested {SCENE_START}: scene opened at line {opened_at} is still open"
                        ),
                    })
                }
                None => open = Some((line_no, Vec::new(), String::new())),
            },
            SCENE_END => match open.take() {
                None => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("{SCENE_END} without a matching {SCENE_START}"),
                    })
                }
                Some((opened_at, mut paragraphs, mut current)) => {
                    flush_para(&mut paragraphs, &mut current);
                    if paragraphs.is_empty() {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("scene opened at line {opened_at} has no paragraphs"),
                        });
                    }
                    scenes.push(Scene { paragraphs });
                }
            },
            "" => {
                if let Some((_, ref mut paragraphs, ref mut current)) = open {
                    flush_para(paragraphs, current);
                }
            }
            _ => match open {
                Some((_, _, ref mut current)) => {
                    if !current.is_empty() {
                        current.push('\n');
                    }
                    current.push_str(line);
                }
                None => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("text outside any scene (expected {SCENE_START})"),
                    })
                }
            },
        }
    }
    if let Some((opened_at, _, _)) = open {
        return Err(Error::Parse {
            line: opened_at,
            msg: format!("unclosed {SCENE_START} (no matching {SCENE_END})"),
        });
    }
    if scenes.is_empty() {
        return Err(Error::Parse { line: 1, msg: "storyboard has no scenes".to_string() });
    }
    Ok(Storyboard { scenes })
}

/// Detect the prompt format: any scene marker makes the text a strict
/// Format-3 storyboard; otherwise it is free text with optional hints like
/// "Scene 2:" at the start of a line.
pub fn parse_prompt(text: &str) -> Result<Prompt> {
    if text.contains(SCENE_START) || text.contains(SCENE_END) {
        return parse_storyboard(text).map(Prompt::Storyboard);
    }
    let mut paragraphs = Vec::new();
    let mut current = String::new();
    let mut scene_hints = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            if !current.is_empty() {
                paragraphs.push(std::mem::take(&mut current));
            }
            continue;
        }
        if let Some(hint) = scene_hint(line) {
            scene_hints.push(hint);
        }
        if !current.is_empty() {
            current.push('\n');
        }
        current.push_str(line);
    }
    if !current.is_empty() {
        paragraphs.push(current);
    }
    Ok(Prompt::FreeText { paragraphs, scene_hints })
}

fn scene_hint(line: &str) -> Option<String> {
    let lower = line.to_ascii_lowercase();
    let rest = lower.strip_prefix("scene ")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    let after = &rest[digits.len()..];
    if after.starts_with(':') || after.starts_with('.') {
        Some(format!("scene {digits}"))
    } else {
        None
    }
}

// ----- tokenizer ----------------------------------------------------------------

/// Byte-level text tokenization: one id per byte, stable across runs.
pub fn tokenize_text(paragraph: &str) -> Result<Vec<u32>> {
    if paragraph.is_empty() {
        return Err(Error::config("cannot tokenize an empty paragraph"));
    }
    Ok(paragraph.bytes().map(u32::from).collect())
}

/// Inverse of [`tokenize_text`] for byte ids; non-text ids are an error.
pub fn detokenize_text(tokens: &[u32]) -> Result<String> {
    let bytes: Vec<u8> = tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::config(format!("token {t} is not a text byte")))
        })
        .collect::<Result<_>>()?;
    String::from_utf8(bytes).map_err(|e| Error::config(format!("invalid utf-8: {e}")))
}

// ----- profiles and assembly -----------------------------------------------------

/// Token-accounting profile. The full-scale numbers mirror the fine-tuning
/// setup (1350 tokens per latent frame, 13 frames per 3-second segment, one
/// frame of overlap); the toy profile keeps the same structure at desk scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProfileConfig {
    pub tokens_per_frame: usize,
    pub frames_per_segment: usize,
    pub text_tokens_per_segment: usize,
    pub overlap_frames: usize,
}

impl ProfileConfig {
    pub fn full_scale() -> Self {
        ProfileConfig {
            tokens_per_frame: 1350,
            frames_per_segment: 13,
            text_tokens_per_segment: 132,
            overlap_frames: 1,
        }
    }

    pub fn toy() -> Self {
        ProfileConfig {
            tokens_per_frame: 4,
            frames_per_segment: 3,
            text_tokens_per_segment: 5,
            overlap_frames: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_frame == 0 || self.frames_per_segment == 0 {
            return Err(Error::config("profile extents must be positive"));
        }
        if self.overlap_frames >= self.frames_per_segment {
            return Err(Error::config(format!(
                "overlap_frames {} must be < frames_per_segment {}",
                self.overlap_frames, self.frames_per_segment
            )));
        }
        Ok(())
    }

    /// Total video tokens for `n` segments: shared frames counted once.
    pub fn video_tokens(&self, n_segments: usize) -> usize {
        if n_segments == 0 {
            return 0;
        }
        let frames =
            n_segments * self.frames_per_segment - (n_segments - 1) * self.overlap_frames;
        frames * self.tokens_per_frame
    }

    /// Full context length for `n` segments, linear in `n` at fixed overlap.
    pub fn context_length(&self, n_segments: usize) -> usize {
        n_segments * self.text_tokens_per_segment + self.video_tokens(n_segments)
    }

    /// Context lengths of the five fine-tuning stages, kept as profile
    /// metadata: apart from the final (text-free) row they do not decompose
    /// into pure video-token counts, so they are reference values, not
    /// derived ones.
    pub fn stage_context_lengths() -> [usize; 5] {
        [18048, 51456, 99894, 168320, 341550]
    }
}

/// Supplies `frames_per_segment * tokens_per_frame` video token ids per
/// segment. Sources must agree on shared overlap frames.
pub trait VideoTokenSource {
    fn segment_tokens(&self, segment: usize) -> Vec<u32>;
    fn n_segments(&self) -> usize;
}

/// Deterministic placeholder ids derived from the global frame timeline, so
/// the aliased frame of adjacent segments carries identical ids.
pub struct PlaceholderVideoSource {
    profile: ProfileConfig,
    n_segments: usize,
}

impl PlaceholderVideoSource {
    pub fn new(profile: ProfileConfig, n_segments: usize) -> Self {
        PlaceholderVideoSource { profile, n_segments }
    }
}

impl VideoTokenSource for PlaceholderVideoSource {
    fn segment_tokens(&self, segment: usize) -> Vec<u32> {
        let p = &self.profile;
        let stride = p.frames_per_segment - p.overlap_frames;
        let first_frame = segment * stride;
        let mut out = Vec::with_capacity(p.frames_per_segment * p.tokens_per_frame);
        for f in 0..p.frames_per_segment {
            let global = first_frame + f;
            for j in 0..p.tokens_per_frame {
                out.push(VIDEO_TOKEN_BASE + (global * p.tokens_per_frame + j) as u32);
            }
        }
        out
    }

    fn n_segments(&self) -> usize {
        self.n_segments
    }
}

/// Per-segment extents into the flat token sequence. `video_start/video_len`
/// cover the segment's own stored block; for segments after the first, the
/// aliased overlap region lives at the tail of the previous segment's block
/// and is reported by [`InterleavedSequence::shared_prefix`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpan {
    pub text_start: usize,
    pub text_len: usize,
    pub video_start: usize,
    pub video_len: usize,
}

#[derive(Clone, Debug)]
pub struct InterleavedSequence {
    pub tokens: Vec<u32>,
    pub spans: Vec<SegmentSpan>,
    /// Owning segment per token (overlap tokens map to the earlier segment
    /// here and to both segments in the attention mask).
    pub segment_of: Vec<u32>,
    /// Scene index per segment.
    pub scene_of: Vec<u32>,
    pub profile: ProfileConfig,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_segments(&self) -> usize {
        self.spans.len()
    }

    /// Flat range of the overlap frame segment `i` shares with segment `i-1`
    /// (stored once, at the tail of the previous segment's video block).
    pub fn shared_prefix(&self, segment: usize) -> Option<Range<usize>> {
        if segment == 0 || self.profile.overlap_frames == 0 {
            return None;
        }
        let prev = &self.spans[segment - 1];
        let shared = self.profile.overlap_frames * self.profile.tokens_per_frame;
        Some(prev.video_start + prev.video_len - shared..prev.video_start + prev.video_len)
    }

    /// All flat ranges belonging to a segment: its own span(s) plus the
    /// shared prefix from its predecessor.
    pub fn segment_ranges(&self, segment: usize) -> Vec<Range<usize>> {
        let span = &self.spans[segment];
        let mut out = Vec::with_capacity(3);
        if let Some(shared) = self.shared_prefix(segment) {
            out.push(shared);
        }
        out.push(span.text_start..span.text_start + span.text_len);
        out.push(span.video_start..span.video_start + span.video_len);
        out.retain(|r| !r.is_empty());
        // adjacent ranges merge (text may be absent)
        out.sort_by_key(|r| r.start);
        let mut merged: Vec<Range<usize>> = Vec::new();
        for r in out {
            match merged.last_mut() {
                Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
                _ => merged.push(r),
            }
        }
        merged
    }
}

/// Build the flat sequence: per segment its text tokens then its video
/// tokens, with each overlap frame stored once (the later segment's first
/// frame aliases the earlier segment's last frame).
pub fn assemble_sequence(
    storyboard: &Storyboard,
    profile: &ProfileConfig,
    video: &dyn VideoTokenSource,
) -> Result<InterleavedSequence> {
    profile.validate()?;
    let n = storyboard.total_segments();
    if video.n_segments() != n {
        return Err(Error::config(format!(
            "storyboard has {n} segments but the video source supplies {}",
            video.n_segments()
        )));
    }
    let per_frame = profile.tokens_per_frame;
    let shared = profile.overlap_frames * per_frame;
    let full_video = profile.frames_per_segment * per_frame;

    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut segment_of = Vec::new();
    let mut scene_of = Vec::new();

    let mut seg = 0usize;
    for (scene_idx, scene) in storyboard.scenes.iter().enumerate() {
        for paragraph in &scene.paragraphs {
            let text = if profile.text_tokens_per_segment > 0 {
                let mut t = tokenize_text(paragraph)?;
                t.truncate(profile.text_tokens_per_segment);
                while t.len() < profile.text_tokens_per_segment {
                    t.push(NULL_TOKEN);
                }
                t
            } else {
                Vec::new()
            };
            let vid = video.segment_tokens(seg);
            if vid.len() != full_video {
                return Err(Error::config(format!(
                    "segment {seg}: video source gave {} tokens, profile wants {full_video}",
                    vid.len()
                )));
            }
            // skip this segment's copy of the aliased frames
            let fresh = if seg == 0 { &vid[..] } else { &vid[shared..] };

            let text_start = tokens.len();
            tokens.extend_from_slice(&text);
            let video_start = tokens.len();
            tokens.extend_from_slice(fresh);
            segment_of.extend(std::iter::repeat(seg as u32).take(text.len() + fresh.len()));
            spans.push(SegmentSpan {
                text_start,
                text_len: text.len(),
                video_start,
                video_len: fresh.len(),
            });
            scene_of.push(scene_idx as u32);
            seg += 1;
        }
    }
    Ok(InterleavedSequence {
        tokens,
        spans,
        segment_of,
        scene_of,
        profile: *profile,
    })
}

/// Segment-local attention admissibility: token t admits token s iff they
/// share a segment; overlap tokens belong to both adjacent segments.
pub fn build_local_mask(seq: &InterleavedSequence) -> Result<AttentionMask> {
    let mut segments = Vec::new();
    for s in 0..seq.n_segments() {
        segments.extend(seq.segment_ranges(s));
    }
    AttentionMask::from_segments(seq.len(), &segments)
}

// ----- sequence dump formats -------------------------------------------------------

/// One CSV row per segment with its span extents.
pub fn spans_csv(seq: &InterleavedSequence) -> String {
    let mut out = String::from("segment,scene,text_start,text_len,video_start,video_len\n");
    for (i, span) in seq.spans.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, seq.scene_of[i], span.text_start, span.text_len, span.video_start, span.video_len
        ));
    }
    out
}

/// Little-endian 32-bit token-id sidecar.
pub fn tokens_to_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
}

pub fn tokens_from_bytes(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::config("token sidecar length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
