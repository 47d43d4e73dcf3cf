//! Parsing of agent replies.

use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;

use super::{StrategyTag, Suggestion, SuggestionItem};

static ITEM_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:[-*•]|\d+[.)])?\s*\[([A-Za-z0-9_ -]+)\]\s*(.*?)\s*(?:\((?:region|where):\s*([^)]*)\))?\s*$")
        .unwrap()
});

static FENCE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```[^\n`]*\n(.*?)```").unwrap());

/// Parses planner output of the form `- [tag] rationale (region: hint)`.
/// Falls back to one `other` item holding the whole text.
pub fn parse_suggestion(raw: &str) -> Suggestion {
    let mut items = Vec::new();
    for line in raw.lines() {
        let Some(c) = ITEM_RE.captures(line) else {
            continue;
        };
        let rationale = c[2].trim().to_string();
        if rationale.is_empty() {
            continue;
        }
        items.push(SuggestionItem {
            tag: StrategyTag::from_tag(&c[1]),
            rationale,
            region: c
                .get(3)
                .map(|m| m.as_str().trim().to_string())
                .filter(|s| !s.is_empty()),
        });
    }
    if items.is_empty() {
        items.push(SuggestionItem {
            tag: StrategyTag::Other,
            rationale: raw.trim().to_string(),
            region: None,
        });
    }
    Suggestion {
        items,
        raw_text: raw.to_string(),
    }
}

/// Contents of every fenced code block, in order.
pub fn code_blocks(text: &str) -> Vec<&str> {
    FENCE_RE
        .captures_iter(text)
        .map(|c| c.get(1).unwrap().as_str())
        .collect()
}

/// The largest fenced block (earliest on ties) and the block count.
pub fn largest_code_block(text: &str) -> Option<(usize, &str, usize)> {
    let blocks = code_blocks(text);
    let n = blocks.len();
    let mut best: Option<(usize, &str)> = None;
    for (i, b) in blocks.into_iter().enumerate() {
        if best.is_none_or(|(_, cur)| b.len() > cur.len()) {
            best = Some((i, b));
        }
    }
    best.map(|(i, b)| (i, b, n))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TestProposal {
    #[serde(default)]
    pub shapes: Vec<Vec<i64>>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// Extracts the test proposal JSON from a reply, tolerating a fenced block
/// or surrounding prose.
pub fn parse_test_proposal(text: &str) -> Result<TestProposal, String> {
    let mut candidates: Vec<&str> = code_blocks(text);
    if let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) {
        if a < b {
            candidates.push(&text[a..=b]);
        }
    }
    candidates.push(text);
    let mut last_err = String::from("no JSON object found");
    for c in candidates {
        match serde_json::from_str::<TestProposal>(c.trim()) {
            Ok(p) => return Ok(p),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(last_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suggestion_lines() {
        let s = parse_suggestion(
            "Plan:\n- [vectorized-load] load half2 pairs (region: main loop)\n2. [warp-shuffle-reduction] use __shfl_xor_sync\n* [mystery] something\n",
        );
        assert_eq!(s.items.len(), 3);
        assert_eq!(s.items[0].tag, StrategyTag::VectorizedLoad);
        assert_eq!(s.items[0].rationale, "load half2 pairs");
        assert_eq!(s.items[0].region.as_deref(), Some("main loop"));
        assert_eq!(s.items[1].tag, StrategyTag::WarpShuffleReduction);
        assert_eq!(s.items[1].region, None);
        assert_eq!(s.items[2].tag, StrategyTag::Other);
    }

    #[test]
    fn suggestion_fallback() {
        let s = parse_suggestion("just make it faster");
        assert_eq!(s.items.len(), 1);
        assert_eq!(s.items[0].tag, StrategyTag::Other);
        assert_eq!(s.items[0].rationale, "just make it faster");
    }

    #[test]
    fn blocks_largest_and_ties() {
        let t = "a\n```cuda\nshort\n```\nb\n```\nmuch longer body\n```\n";
        let (i, b, n) = largest_code_block(t).unwrap();
        assert_eq!((i, b, n), (1, "much longer body\n", 2));
        let tie = "```\nabc\n```\n```\nxyz\n```\n";
        assert_eq!(largest_code_block(tie).unwrap().1, "abc\n");
        assert!(largest_code_block("no code").is_none());
    }

    #[test]
    fn proposal_in_prose_or_fence() {
        let p = parse_test_proposal("Here you go: {\"shapes\": [[16, 4096]], \"seeds\": [3]} thanks").unwrap();
        assert_eq!(p.shapes, vec![vec![16, 4096]]);
        assert_eq!(p.seeds, vec![3]);
        let p = parse_test_proposal("```json\n{\"shapes\": [[1, 2]]}\n```").unwrap();
        assert!(p.seeds.is_empty());
        assert!(parse_test_proposal("no idea").is_err());
    }
}
