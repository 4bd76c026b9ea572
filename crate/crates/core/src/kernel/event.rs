//! Externally injected events and their line-oriented script format.
//!
//! ```text
//! # <cycle> <event> <args>
//! 1000 tlb_flush page 2 0x40
//! 1000 tlb_flush asid 2
//! 1000 tlb_flush global
//! 2000 spurious_walk 1 2 7 0x1a3
//! 3000 keystroke_ipi 2 0x40
//! 4000 packet_arrival 2 0x40
//! ```
//!
//! `spurious_walk` takes core, asid, tid and a physical page. Page numbers are
//! hexadecimal with a `0x` prefix, everything else is decimal.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ids::{Asid, ExecContext, PhysPage, VirtPage};
use crate::mem::TlbScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEvent {
    TlbFlush(TlbScope),
    SpuriousWalk { ctx: ExecContext, page: PhysPage },
    /// Expands to a page-scoped TLB flush of the victim's shared page.
    KeystrokeIpi { asid: Asid, vpage: VirtPage },
    /// Expands to a page-scoped TLB flush of the victim's shared page.
    PacketArrival { asid: Asid, vpage: VirtPage },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledEvent {
    pub at_cycle: u64,
    pub event: SimEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("script line {line}: {reason}")]
pub struct ScriptError {
    pub line: usize,
    pub reason: String,
}

fn hex(s: &str) -> Result<u64, String> {
    let digits = s
        .strip_prefix("0x")
        .ok_or_else(|| format!("expected 0x-prefixed hex, got `{s}`"))?;
    u64::from_str_radix(digits, 16).map_err(|e| format!("bad hex `{s}`: {e}"))
}

fn dec<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| format!("bad number `{s}`: {e}"))
}

fn parse_event(words: &[&str]) -> Result<SimEvent, String> {
    let arity = |n: usize| {
        if words.len() == n {
            Ok(())
        } else {
            Err(format!("`{}` takes {} arguments", words[0], n - 1))
        }
    };
    match words {
        ["tlb_flush", "page", ..] => {
            arity(4)?;
            Ok(SimEvent::TlbFlush(TlbScope::Page(
                Asid(dec(words[2])?),
                VirtPage(hex(words[3])?),
            )))
        }
        ["tlb_flush", "asid", ..] => {
            arity(3)?;
            Ok(SimEvent::TlbFlush(TlbScope::Asid(Asid(dec(words[2])?))))
        }
        ["tlb_flush", "global", ..] => {
            arity(2)?;
            Ok(SimEvent::TlbFlush(TlbScope::Global))
        }
        ["spurious_walk", ..] => {
            arity(5)?;
            Ok(SimEvent::SpuriousWalk {
                ctx: ExecContext::new(dec(words[1])?, dec(words[2])?, dec(words[3])?),
                page: PhysPage(hex(words[4])?),
            })
        }
        ["keystroke_ipi", ..] | ["packet_arrival", ..] => {
            arity(3)?;
            let asid = Asid(dec(words[1])?);
            let vpage = VirtPage(hex(words[2])?);
            Ok(if words[0] == "keystroke_ipi" {
                SimEvent::KeystrokeIpi { asid, vpage }
            } else {
                SimEvent::PacketArrival { asid, vpage }
            })
        }
        [other, ..] => Err(format!("unknown event `{other}`")),
        [] => Err("missing event".to_string()),
    }
}

pub fn parse_script(text: &str) -> Result<Vec<ScheduledEvent>, ScriptError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let err = |reason: String| ScriptError { line: i + 1, reason };
        let at_cycle = dec(words[0]).map_err(err)?;
        let event = parse_event(&words[1..]).map_err(err)?;
        out.push(ScheduledEvent { at_cycle, event });
    }
    Ok(out)
}

pub fn format_script(events: &[ScheduledEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let _ = match e.event {
            SimEvent::TlbFlush(TlbScope::Page(asid, vpage)) => {
                writeln!(out, "{} tlb_flush page {} {:#x}", e.at_cycle, asid, vpage.0)
            }
            SimEvent::TlbFlush(TlbScope::Asid(asid)) => {
                writeln!(out, "{} tlb_flush asid {}", e.at_cycle, asid)
            }
            SimEvent::TlbFlush(TlbScope::Global) => writeln!(out, "{} tlb_flush global", e.at_cycle),
            SimEvent::SpuriousWalk { ctx, page } => writeln!(
                out,
                "{} spurious_walk {} {} {} {:#x}",
                e.at_cycle, ctx.core, ctx.asid, ctx.tid, page.0
            ),
            SimEvent::KeystrokeIpi { asid, vpage } => {
                writeln!(out, "{} keystroke_ipi {} {:#x}", e.at_cycle, asid, vpage.0)
            }
            SimEvent::PacketArrival { asid, vpage } => {
                writeln!(out, "{} packet_arrival {} {:#x}", e.at_cycle, asid, vpage.0)
            }
        };
    }
    out
}
