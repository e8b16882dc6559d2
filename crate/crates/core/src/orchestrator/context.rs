//! Context manager: collapse old tool output, then trim old turns.

use thiserror::Error;

use super::{Turn, TurnKind};

pub const DEFAULT_TOKEN_BUDGET: usize = 8192;
/// Turns at the tail that are never collapsed or removed.
const PROTECTED_TAIL: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot fit conversation into {budget} tokens (minimum reachable {reachable})")]
pub struct BudgetInfeasible {
    pub budget: usize,
    pub reachable: usize,
}

/// Token estimate used throughout: one token per four characters.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub fn total_tokens(turns: &[Turn]) -> usize {
    turns.iter().map(|t| t.token_estimate).sum()
}

fn collapsed_summary(turn: &Turn) -> String {
    let first = turn.payload.lines().next().unwrap_or("");
    let head: String = first.chars().take(48).collect();
    format!("[collapsed {} chars] {head}", turn.payload.chars().count())
}

/// Index ranges removable as one unit: a call with its result, or a
/// single turn. System turns and the protected tail never qualify.
fn oldest_removable(turns: &[Turn]) -> Option<(usize, usize)> {
    let limit = turns.len().saturating_sub(PROTECTED_TAIL);
    let mut i = 0;
    while i < limit {
        match turns[i].kind {
            TurnKind::System => i += 1,
            TurnKind::ToolCall => {
                let end = turns[i + 1..]
                    .iter()
                    .position(|t| t.kind == TurnKind::ToolResult && t.call_id == turns[i].call_id)
                    .map(|p| i + 1 + p);
                match end {
                    Some(end) if end < limit => return Some((i, end)),
                    _ => return None,
                }
            }
            TurnKind::ToolResult => return None,
            _ => return Some((i, i)),
        }
    }
    None
}

/// Reduces `turns` to fit `budget` estimate units.
pub fn manage_context(mut turns: Vec<Turn>, budget: usize) -> Result<Vec<Turn>, BudgetInfeasible> {
    let system: usize = turns
        .iter()
        .filter(|t| t.kind == TurnKind::System)
        .map(|t| t.token_estimate)
        .sum();
    if budget <= system {
        return Err(BudgetInfeasible {
            budget,
            reachable: system,
        });
    }
    let tail_start = turns.len().saturating_sub(PROTECTED_TAIL);
    let mut idx = 0;
    while total_tokens(&turns) > budget && idx < tail_start {
        let t = &turns[idx];
        if t.kind == TurnKind::ToolResult && !t.collapsed {
            let summary = collapsed_summary(t);
            if estimate_tokens(&summary) < t.token_estimate {
                let t = &mut turns[idx];
                t.token_estimate = estimate_tokens(&summary);
                t.payload = summary;
                t.collapsed = true;
            }
        }
        idx += 1;
    }
    while total_tokens(&turns) > budget {
        match oldest_removable(&turns) {
            Some((a, b)) => {
                turns.drain(a..=b);
            }
            None => {
                return Err(BudgetInfeasible {
                    budget,
                    reachable: total_tokens(&turns),
                })
            }
        }
    }
    Ok(turns)
}
