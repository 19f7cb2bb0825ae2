//! Prompts as ordered, tagged segments.
//!
//! A prompt is decomposed into segments tagged as benign features,
//! adversarial features, or the target-class descriptor. The split is
//! explicit and supplied by the user; no linguistic parsing is attempted.
//! Masking retains only the adversarial segments, which is what the
//! similarity loss is computed against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a segment describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentTag {
    /// Features of the benign sign (removed by masking).
    Benign,
    /// The attacker-chosen appearance description (kept by masking).
    Adversarial,
    /// Descriptor of the class the detector should report (removed by masking).
    TargetClass,
}

/// One tagged piece of a prompt. `text` is non-empty after trimming.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub text: String,
    pub tag: SegmentTag,
}

impl PromptSegment {
    pub fn new(text: impl Into<String>, tag: SegmentTag) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidPrompt("segment text is empty".into()));
        }
        Ok(Self { text, tag })
    }

    pub fn benign(text: impl Into<String>) -> Result<Self> {
        Self::new(text, SegmentTag::Benign)
    }

    pub fn adversarial(text: impl Into<String>) -> Result<Self> {
        Self::new(text, SegmentTag::Adversarial)
    }

    pub fn target_class(text: impl Into<String>) -> Result<Self> {
        Self::new(text, SegmentTag::TargetClass)
    }
}

fn default_separator() -> String {
    " ".to_string()
}

/// An ordered list of tagged segments joined by `separator` when rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub segments: Vec<PromptSegment>,
    #[serde(default = "default_separator")]
    pub separator: String,
}

impl StructuredPrompt {
    /// Builds a prompt with the default single-space separator.
    pub fn new(segments: Vec<PromptSegment>) -> Result<Self> {
        Self::with_separator(segments, " ")
    }

    pub fn with_separator(segments: Vec<PromptSegment>, separator: impl Into<String>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidPrompt("prompt has no segments".into()));
        }
        Ok(Self { segments, separator: separator.into() })
    }

    /// Separator-join of all segment texts in order.
    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(&self.separator)
    }

    /// The masked prompt: exactly the adversarial-tagged segments, in
    /// original order. Errors when no adversarial segment exists.
    pub fn masked(&self) -> Result<StructuredPrompt> {
        let segments: Vec<PromptSegment> = self
            .segments
            .iter()
            .filter(|s| s.tag == SegmentTag::Adversarial)
            .cloned()
            .collect();
        if segments.is_empty() {
            return Err(Error::NoAdversarialSegment);
        }
        Ok(StructuredPrompt { segments, separator: self.separator.clone() })
    }

    /// Replaces the benign-tagged segments with `replacement` segments,
    /// inserted at the position of the first benign segment. Other
    /// segments keep their relative order. Used by prompt-specified
    /// style customization.
    pub fn with_benign_replaced(&self, replacement: &[PromptSegment]) -> Result<StructuredPrompt> {
        let mut segments = Vec::with_capacity(self.segments.len() + replacement.len());
        let mut inserted = false;
        for seg in &self.segments {
            if seg.tag == SegmentTag::Benign {
                if !inserted {
                    segments.extend_from_slice(replacement);
                    inserted = true;
                }
            } else {
                segments.push(seg.clone());
            }
        }
        if !inserted {
            segments.extend_from_slice(replacement);
        }
        Self::with_separator(segments, self.separator.clone())
    }

    /// Parses the prompt-file JSON form: either a bare array of segments
    /// or an object with `segments` and an optional `separator`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum PromptDoc {
            Object(StructuredPrompt),
            Array(Vec<PromptSegment>),
        }
        let doc: PromptDoc = serde_json::from_str(text)?;
        let prompt = match doc {
            PromptDoc::Object(p) => p,
            PromptDoc::Array(segments) => {
                StructuredPrompt { segments, separator: default_separator() }
            }
        };
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidPrompt("prompt has no segments".into()));
        }
        for seg in &self.segments {
            if seg.text.trim().is_empty() {
                return Err(Error::InvalidPrompt("segment text is empty".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(segments: Vec<PromptSegment>) -> StructuredPrompt {
        StructuredPrompt::new(segments).unwrap()
    }

    #[test]
    fn render_joins_segments_in_order() {
        let p = prompt(vec![
            PromptSegment::benign("an octagonal sign").unwrap(),
            PromptSegment::adversarial("with a ghost paint on it").unwrap(),
        ]);
        assert_eq!(p.render(), "an octagonal sign with a ghost paint on it");
    }

    #[test]
    fn render_single_segment_is_identity() {
        let p = prompt(vec![PromptSegment::adversarial("x").unwrap()]);
        assert_eq!(p.render(), "x");
    }

    #[test]
    fn render_three_segments_with_space() {
        let p = prompt(vec![
            PromptSegment::benign("a").unwrap(),
            PromptSegment::benign("b").unwrap(),
            PromptSegment::benign("c").unwrap(),
        ]);
        assert_eq!(p.render(), "a b c");
    }

    #[test]
    fn masked_keeps_only_adversarial() {
        let p = prompt(vec![
            PromptSegment::benign("a red octagonal road sign").unwrap(),
            PromptSegment::adversarial("with a ghost paint on it").unwrap(),
        ]);
        let m = p.masked().unwrap();
        assert_eq!(m.render(), "with a ghost paint on it");
    }

    #[test]
    fn masked_all_adversarial_is_identity() {
        let p = prompt(vec![
            PromptSegment::adversarial("x").unwrap(),
            PromptSegment::adversarial("y").unwrap(),
        ]);
        assert_eq!(p.masked().unwrap(), p);
    }

    #[test]
    fn masked_preserves_order() {
        let p = prompt(vec![
            PromptSegment::benign("b1").unwrap(),
            PromptSegment::adversarial("a1").unwrap(),
            PromptSegment::benign("b2").unwrap(),
            PromptSegment::adversarial("a2").unwrap(),
        ]);
        let m = p.masked().unwrap();
        let texts: Vec<_> = m.segments.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["a1", "a2"]);
    }

    #[test]
    fn masked_without_adversarial_errors() {
        let p = prompt(vec![PromptSegment::benign("only benign").unwrap()]);
        assert!(matches!(p.masked(), Err(Error::NoAdversarialSegment)));
    }

    #[test]
    fn target_class_does_not_survive_masking() {
        let p = prompt(vec![
            PromptSegment::target_class("a STOP sign").unwrap(),
            PromptSegment::adversarial("with a ghost on it").unwrap(),
        ]);
        let m = p.masked().unwrap();
        assert!(m.segments.iter().all(|s| s.tag == SegmentTag::Adversarial));
    }

    #[test]
    fn empty_segment_text_rejected() {
        assert!(PromptSegment::benign("   ").is_err());
        assert!(StructuredPrompt::new(vec![]).is_err());
    }

    #[test]
    fn benign_replacement_substitutes_in_place() {
        let benign = prompt(vec![
            PromptSegment::target_class("a speed limit sign").unwrap(),
            PromptSegment::benign("with the number 5 on it").unwrap(),
        ]);
        let replaced = benign
            .with_benign_replaced(&[PromptSegment::adversarial("with a robot painted on it").unwrap()])
            .unwrap();
        assert_eq!(replaced.render(), "a speed limit sign with a robot painted on it");
    }

    #[test]
    fn json_array_form_parses() {
        let text = r#"[
            {"text": "a red octagonal road sign", "tag": "benign"},
            {"text": "with a ghost paint on it", "tag": "adversarial"},
            {"text": "stop sign", "tag": "target-class"}
        ]"#;
        let p = StructuredPrompt::from_json_str(text).unwrap();
        assert_eq!(p.segments.len(), 3);
        assert_eq!(p.separator, " ");
        assert_eq!(p.segments[2].tag, SegmentTag::TargetClass);
    }

    #[test]
    fn json_object_form_with_separator_parses() {
        let text = r#"{"segments": [{"text": "x", "tag": "adversarial"}], "separator": ", "}"#;
        let p = StructuredPrompt::from_json_str(text).unwrap();
        assert_eq!(p.separator, ", ");
    }

    #[test]
    fn json_rejects_empty_segment_list() {
        assert!(StructuredPrompt::from_json_str("[]").is_err());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_tag() -> impl Strategy<Value = SegmentTag> {
        prop_oneof![
            Just(SegmentTag::Benign),
            Just(SegmentTag::Adversarial),
            Just(SegmentTag::TargetClass),
        ]
    }

    fn arb_segments() -> impl Strategy<Value = Vec<PromptSegment>> {
        prop::collection::vec(("[a-z]{1,8}", arb_tag()), 1..12).prop_map(|items| {
            items
                .into_iter()
                .map(|(text, tag)| PromptSegment::new(text, tag).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn masked_never_contains_non_adversarial(segments in arb_segments()) {
            let p = StructuredPrompt::new(segments).unwrap();
            if let Ok(m) = p.masked() {
                prop_assert!(m.segments.iter().all(|s| s.tag == SegmentTag::Adversarial));
            }
        }

        #[test]
        fn masking_is_idempotent(segments in arb_segments()) {
            let p = StructuredPrompt::new(segments).unwrap();
            if let Ok(m) = p.masked() {
                prop_assert_eq!(m.masked().unwrap(), m);
            }
        }

        #[test]
        fn masked_render_excludes_benign_sentinels(n in 1usize..6, k in 1usize..6) {
            // Benign texts are unique sentinel tokens that cannot occur in
            // adversarial texts, so any leak shows up as a substring hit.
            let mut segments = Vec::new();
            for i in 0..n {
                segments.push(PromptSegment::benign(format!("BENIGN_SENTINEL_{i}")).unwrap());
            }
            for i in 0..k {
                segments.push(PromptSegment::adversarial(format!("adv{i}")).unwrap());
            }
            let p = StructuredPrompt::new(segments).unwrap();
            let rendered = p.masked().unwrap().render();
            for i in 0..n {
                let sentinel = format!("BENIGN_SENTINEL_{i}");
                let leaked = rendered.contains(&sentinel);
                prop_assert!(!leaked, "benign text {} leaked into masked render", sentinel);
            }
        }
    }
}
