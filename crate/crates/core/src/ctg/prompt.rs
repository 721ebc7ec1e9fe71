use std::fmt::Write;

use super::term::TermIdSequence;
use crate::corpus::ItemRecord;

const TARGET_HEADER: &str = "## Target item";
const ID_PREFIX: &str = "ID: ";

const SYSTEM_TEXT: &str = "You assign standardized keyword identifiers to catalog items. \
Each identifier is a short ordered list of terms that summarizes an item factually. \
Items that share an attribute must use the same term for it, and every item must also \
carry terms that set it apart from similar items.";

/// A neighbor shown in the prompt, with its identifier if one was already
/// assigned.
#[derive(Debug, Clone, Copy)]
pub struct PromptNeighbor<'a> {
    pub item: &'a ItemRecord,
    pub tid: Option<&'a TermIdSequence>,
}

fn indent_metadata(out: &mut String, text: &str) {
    for line in text.lines() {
        let _ = writeln!(out, "  {line}");
    }
}

/// Builds the (system, user) prompt pair for one target item.
pub fn build_ctg_prompt(
    target: &ItemRecord,
    neighbors: &[PromptNeighbor<'_>],
    tid_len: usize,
) -> (String, String) {
    let mut user = String::new();
    let _ = writeln!(user, "{TARGET_HEADER}");
    let _ = writeln!(user, "{ID_PREFIX}{}", target.item_id);
    let _ = writeln!(user, "Metadata:");
    indent_metadata(&mut user, &target.metadata_text);

    if !neighbors.is_empty() {
        let _ = writeln!(user, "\n## Similar items");
        for (idx, n) in neighbors.iter().enumerate() {
            let _ = writeln!(user, "### Similar item {}", idx + 1);
            let _ = writeln!(user, "Metadata:");
            indent_metadata(&mut user, &n.item.metadata_text);
            if let Some(tid) = n.tid {
                let _ = writeln!(user, "Assigned terms: {}", tid.canonical());
            }
        }
    }

    let _ = writeln!(user, "\n## Rules");
    let _ = writeln!(user, "- Output exactly {tid_len} terms.");
    let _ = writeln!(
        user,
        "- A term is one or more words joined by hyphens; every word starts with a capital \
letter followed by lowercase letters or digits (examples: Cell-Phone, 6-Inch, Dual-Sim)."
    );
    let _ = writeln!(user, "- Use only the letters A-Z, a-z, digits and hyphens; at most 40 characters per term.");
    if !neighbors.is_empty() {
        let _ = writeln!(
            user,
            "- For attributes the target shares with the similar items, reuse their terms exactly \
(including any assigned terms shown above)."
        );
        let _ = writeln!(
            user,
            "- Include terms that capture what distinguishes the target from the similar items."
        );
    }
    let _ = writeln!(user, "- Order terms from the most general (category) to the most specific.");
    let _ = writeln!(user, "- Do not repeat a term.");
    let _ = writeln!(user, "\n## Output format");
    let _ = write!(
        user,
        "Reply with a single line containing exactly {tid_len} terms separated by \", \" and nothing else."
    );
    (SYSTEM_TEXT.to_owned(), user)
}

/// Recovers the target item id from a prompt built by [`build_ctg_prompt`].
pub fn prompt_target_id(user_text: &str) -> Option<String> {
    let mut lines = user_text.lines();
    lines.find(|l| *l == TARGET_HEADER)?;
    lines
        .next()?
        .strip_prefix(ID_PREFIX)
        .map(str::to_owned)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, text: &str) -> ItemRecord {
        ItemRecord {
            item_id: id.into(),
            title: text.into(),
            metadata_text: text.into(),
            domain_tag: None,
        }
    }

    #[test]
    fn states_exact_count() {
        let (_, user) = build_ctg_prompt(&item("t", "phone"), &[], 5);
        assert!(user.contains("Output exactly 5 terms."));
        assert!(user.contains("exactly 5 terms separated by \", \""));
    }

    #[test]
    fn renders_assigned_neighbor_tid() {
        let n = item("n", "other phone\nblack");
        let tid = TermIdSequence::from_canonical("Cell-Phone, Android, Black").unwrap();
        let (_, user) = build_ctg_prompt(
            &item("t", "phone"),
            &[PromptNeighbor {
                item: &n,
                tid: Some(&tid),
            }],
            3,
        );
        assert!(user.contains("Assigned terms: Cell-Phone, Android, Black"));
        assert!(user.contains("  other phone\n  black\n"));
    }

    #[test]
    fn no_neighbor_block_on_shortfall() {
        let (sys, user) = build_ctg_prompt(&item("t", "phone"), &[], 5);
        assert!(!user.contains("Similar item"));
        assert!(user.contains("## Rules"));
        assert!(!sys.is_empty());
    }

    #[test]
    fn deterministic_and_target_id_recoverable() {
        let n = item("n", "x");
        let neighbors = [PromptNeighbor { item: &n, tid: None }];
        let a = build_ctg_prompt(&item("B00X", "phone"), &neighbors, 5);
        let b = build_ctg_prompt(&item("B00X", "phone"), &neighbors, 5);
        assert_eq!(a, b);
        assert_eq!(prompt_target_id(&a.1).as_deref(), Some("B00X"));
        assert_eq!(prompt_target_id("nothing"), None);
    }
}
