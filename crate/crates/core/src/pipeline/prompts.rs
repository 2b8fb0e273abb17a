//! Agent prompt templates and strict parsing of agent replies.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;

use crate::backends::PromptStage;
use crate::error::{Error, Result};
use crate::types::Confidence;

pub const INITIAL_TEMPLATE: &str = include_str!("../../templates/stage1_initial.txt");
pub const DEEP_DIVE_TEMPLATE: &str = include_str!("../../templates/stage2_deepdive.txt");

const INITIAL_FILE: &str = "stage1_initial.txt";
const DEEP_DIVE_FILE: &str = "stage2_deepdive.txt";

/// Prompt texts with `{slot}` placeholders. Unknown braces are left as is,
/// so JSON examples inside a template need no escaping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplates {
    pub initial: String,
    pub deep_dive: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            initial: INITIAL_TEMPLATE.to_string(),
            deep_dive: DEEP_DIVE_TEMPLATE.to_string(),
        }
    }
}

fn render(template: &str, slots: &[(&str, String)]) -> String {
    slots.iter().fold(template.to_string(), |acc, (name, value)| {
        acc.replace(&format!("{{{name}}}"), value)
    })
}

pub fn format_indices(indices: &[usize]) -> String {
    let parts: Vec<String> = indices.iter().map(|i| i.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

impl PromptTemplates {
    /// Reads `stage1_initial.txt` and `stage2_deepdive.txt` from `dir`,
    /// falling back to the built-in text for a missing file.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str, fallback: &str| -> Result<String> {
            let p = dir.join(name);
            if p.exists() {
                Ok(std::fs::read_to_string(p)?)
            } else {
                Ok(fallback.to_string())
            }
        };
        Ok(Self {
            initial: read(INITIAL_FILE, INITIAL_TEMPLATE)?,
            deep_dive: read(DEEP_DIVE_FILE, DEEP_DIVE_TEMPLATE)?,
        })
    }

    pub fn render_initial(&self, duration_s: f64, indices: &[usize], question: &str) -> String {
        render(
            &self.initial,
            &[
                ("duration_seconds", duration_s.to_string()),
                ("n_indices", indices.len().to_string()),
                ("initial_indices", format_indices(indices)),
                ("question", question.to_string()),
            ],
        )
    }

    pub fn render_deep_dive(
        &self,
        duration_s: f64,
        question: &str,
        buffer: &str,
        indices: &[usize],
        segment: (usize, usize),
    ) -> String {
        render(
            &self.deep_dive,
            &[
                ("duration_seconds", duration_s.to_string()),
                ("question", question.to_string()),
                ("buffer", buffer.to_string()),
                ("n_indices", indices.len().to_string()),
                ("indices", format_indices(indices)),
                ("start_idx", segment.0.to_string()),
                ("end_idx", segment.1.to_string()),
            ],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameAnalysis {
    pub index: usize,
    pub caption: String,
    pub relevance: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Revision {
    pub index: usize,
    pub relevance: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgentResponse {
    pub frame_analysis: Vec<FrameAnalysis>,
    pub revised_prev_scores: Vec<Revision>,
    pub confidence: Confidence,
    pub answer_attempt: String,
    pub reasoning: String,
}

#[derive(Deserialize)]
struct RawFrame {
    index: i64,
    #[serde(default)]
    caption: String,
    relevance: i64,
}

#[derive(Deserialize)]
struct RawRevision {
    index: i64,
    relevance: i64,
}

#[derive(Deserialize)]
struct RawResponse {
    frame_analysis: Option<Vec<RawFrame>>,
    new_frame_analysis: Option<Vec<RawFrame>>,
    revised_prev_scores: Option<Vec<RawRevision>>,
    confidence: String,
    answer_attempt: String,
    #[serde(default)]
    reasoning: String,
}

/// The JSON object inside `text`, tolerating code fences and surrounding prose.
fn json_body(text: &str) -> Result<&str> {
    let start = text.find('{');
    let end = text.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => Ok(&text[s..=e]),
        _ => Err(Error::AgentResponse("no JSON object in reply".into())),
    }
}

fn relevance(index: i64, value: i64) -> Result<u8> {
    if (1..=5).contains(&value) {
        Ok(value as u8)
    } else {
        Err(Error::AgentResponse(format!(
            "relevance {value} for frame {index} outside 1..5"
        )))
    }
}

/// Parses and validates one reply. Every requested frame must be analysed
/// exactly once, and revisions may only name frames shown earlier.
pub fn parse_agent_response(
    text: &str,
    stage: PromptStage,
    requested: &[usize],
    previously_shown: &[usize],
) -> Result<AgentResponse> {
    let raw: RawResponse = serde_json::from_str(json_body(text)?).map_err(|e| Error::AgentResponse(e.to_string()))?;
    let (frames, key) = match stage {
        PromptStage::Initial => (raw.frame_analysis, "frame_analysis"),
        PromptStage::DeepDive => (raw.new_frame_analysis, "new_frame_analysis"),
    };
    let frames = frames.ok_or_else(|| Error::AgentResponse(format!("missing `{key}`")))?;
    let wanted: BTreeSet<usize> = requested.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut frame_analysis = Vec::with_capacity(frames.len());
    for f in frames {
        let idx = usize::try_from(f.index)
            .ok()
            .filter(|i| wanted.contains(i))
            .ok_or_else(|| Error::AgentResponse(format!("frame {} was not part of the request", f.index)))?;
        if !seen.insert(idx) {
            return Err(Error::AgentResponse(format!("frame {idx} analysed twice")));
        }
        frame_analysis.push(FrameAnalysis {
            index: idx,
            caption: f.caption,
            relevance: relevance(f.index, f.relevance)?,
        });
    }
    if seen != wanted {
        let missing: Vec<_> = wanted.difference(&seen).collect();
        return Err(Error::AgentResponse(format!("frames {missing:?} not analysed")));
    }
    let shown: BTreeSet<usize> = previously_shown.iter().copied().collect();
    let revised_prev_scores = raw
        .revised_prev_scores
        .unwrap_or_default()
        .into_iter()
        .map(|r| {
            let idx = usize::try_from(r.index)
                .ok()
                .filter(|i| shown.contains(i))
                .ok_or_else(|| Error::AgentResponse(format!("revision for frame {} that was never shown", r.index)))?;
            Ok(Revision {
                index: idx,
                relevance: relevance(r.index, r.relevance)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AgentResponse {
        frame_analysis,
        revised_prev_scores,
        confidence: raw.confidence.parse()?,
        answer_attempt: raw.answer_attempt,
        reasoning: raw.reasoning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_have_their_slots_filled() {
        let t = PromptTemplates::default();
        let p = t.render_initial(126.893, &[0, 31, 63], "What happens first?");
        assert!(p.contains("126.893 seconds"));
        assert!(p.contains("these 3 initial frames (indices: [0, 31, 63])"));
        assert!(p.contains("\"What happens first?\""));
        assert!(p.contains("{\"frame_analysis\""));
        let d = t.render_deep_dive(10.0, "q", "frame 0: relevance 2", &[37, 44, 50, 57], (31, 63));
        assert!(d.contains("indices: [37, 44, 50, 57]) from the gap (31, 63)"));
        assert!(d.contains("frame 0: relevance 2"));
        assert!(!d.contains("{start_idx}") && !d.contains("{buffer}"));
    }

    #[test]
    fn parses_fenced_initial_reply() {
        let text = "```json\n{\"frame_analysis\": [{\"index\": 0, \"caption\": \"a\", \"relevance\": 2},\
            {\"index\": 31, \"caption\": \"b\", \"relevance\": 5}, {\"index\": 63, \"caption\": \"c\", \"relevance\": 3}],\
            \"confidence\": \"Medium\", \"answer_attempt\": \"x\", \"reasoning\": \"r\"}\n```";
        let r = parse_agent_response(text, PromptStage::Initial, &[0, 31, 63], &[]).unwrap();
        let rel: Vec<u8> = r.frame_analysis.iter().map(|f| f.relevance).collect();
        assert_eq!(rel, vec![2, 5, 3]);
        assert_eq!(r.confidence, Confidence::Medium);
    }

    #[test]
    fn schema_violations_are_rejected() {
        let reply = |rel: i64| {
            format!(
                "{{\"frame_analysis\": [{{\"index\": 0, \"caption\": \"a\", \"relevance\": {rel}}}], \
                 \"confidence\": \"high\", \"answer_attempt\": \"x\"}}"
            )
        };
        assert!(parse_agent_response(&reply(7), PromptStage::Initial, &[0], &[]).is_err());
        assert!(parse_agent_response(&reply(0), PromptStage::Initial, &[0], &[]).is_err());
        assert!(parse_agent_response(&reply(3), PromptStage::Initial, &[0], &[]).is_ok());
        assert!(parse_agent_response(&reply(3), PromptStage::Initial, &[0, 5], &[]).is_err());
        assert!(parse_agent_response(&reply(3), PromptStage::DeepDive, &[0], &[]).is_err());
        assert!(parse_agent_response("no json here", PromptStage::Initial, &[0], &[]).is_err());
    }

    #[test]
    fn revisions_must_target_shown_frames() {
        let text = "{\"new_frame_analysis\": [{\"index\": 40, \"caption\": \"a\", \"relevance\": 5}], \
            \"revised_prev_scores\": [{\"index\": 31, \"relevance\": 2}], \"confidence\": \"high\", \"answer_attempt\": \"x\"}";
        let ok = parse_agent_response(text, PromptStage::DeepDive, &[40], &[0, 31, 63]).unwrap();
        assert_eq!(
            ok.revised_prev_scores,
            vec![Revision {
                index: 31,
                relevance: 2
            }]
        );
        assert!(parse_agent_response(text, PromptStage::DeepDive, &[40], &[0, 63]).is_err());
    }
}
