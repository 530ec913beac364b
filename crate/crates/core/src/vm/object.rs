//! `LFOBJ1` text object files.
//!
//! ```text
//! LFOBJ1
//! base 0x555555554000
//! entry 0x0
//! sym main 0x0
//! data 0x40 0x10
//! img 0130...          (64 hex chars per line, last line may be shorter)
//! ```
//!
//! `data OFFSET LEN` lines record which image ranges hold data rather than
//! code; readers that do not know them may skip them.

use std::fmt::Write as _;

use super::{DataSegment, Program, VmError};

pub const OBJECT_MAGIC: &str = "LFOBJ1";
const IMG_CHARS: usize = 64;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ObjectError {
    #[error("missing {OBJECT_MAGIC} header")]
    BadMagic,
    #[error("line {0}: {1}")]
    Malformed(usize, String),
    #[error("missing `{0}` line")]
    Missing(&'static str),
    #[error(transparent)]
    Invalid(#[from] VmError),
}

pub fn write_object(p: &Program) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{OBJECT_MAGIC}");
    let _ = writeln!(s, "base {:#x}", p.base_addr_canonical);
    let _ = writeln!(s, "entry {:#x}", p.entry_offset);
    for (name, off) in &p.symbols {
        let _ = writeln!(s, "sym {name} {off:#x}");
    }
    for seg in &p.data_segments {
        let _ = writeln!(s, "data {:#x} {:#x}", seg.offset, seg.bytes.len());
    }
    let hex: String = p.image.iter().map(|b| format!("{b:02x}")).collect();
    for chunk in hex.as_bytes().chunks(IMG_CHARS) {
        let _ = writeln!(s, "img {}", std::str::from_utf8(chunk).expect("ascii"));
    }
    s
}

fn hex_u64(s: &str) -> Option<u64> {
    u64::from_str_radix(s.strip_prefix("0x")?, 16).ok()
}

pub fn parse_object(text: &str) -> Result<Program, ObjectError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == OBJECT_MAGIC => {}
        _ => return Err(ObjectError::BadMagic),
    }
    let mut base = None;
    let mut entry = None;
    let mut symbols = std::collections::BTreeMap::new();
    let mut segs = Vec::new();
    let mut image = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let bad = |m: &str| ObjectError::Malformed(n, m.to_string());
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["base", v] => base = Some(hex_u64(v).ok_or_else(|| bad("bad base"))?),
            ["entry", v] => entry = Some(hex_u64(v).ok_or_else(|| bad("bad entry"))?),
            ["sym", name, v] => {
                symbols.insert(
                    name.to_string(),
                    hex_u64(v).ok_or_else(|| bad("bad symbol offset"))?,
                );
            }
            ["data", off, len] => {
                let off = hex_u64(off).ok_or_else(|| bad("bad data offset"))?;
                let len = hex_u64(len).ok_or_else(|| bad("bad data length"))?;
                segs.push((off, len));
            }
            ["img", hex] => {
                if hex.len() % 2 != 0 || hex.len() > IMG_CHARS {
                    return Err(bad("bad img line length"));
                }
                for pair in hex.as_bytes().chunks(2) {
                    let s = std::str::from_utf8(pair).map_err(|_| bad("non-ascii img"))?;
                    image.push(u8::from_str_radix(s, 16).map_err(|_| bad("bad hex in img"))?);
                }
            }
            _ => return Err(bad("unrecognized line")),
        }
    }
    let data_segments = segs
        .into_iter()
        .map(|(off, len)| {
            let end = off
                .checked_add(len)
                .filter(|&e| e <= image.len() as u64)
                .ok_or(ObjectError::Invalid(VmError::InvalidProgram(format!(
                    "data segment {off:#x}+{len:#x} outside image"
                ))))?;
            Ok(DataSegment {
                offset: off,
                bytes: image[off as usize..end as usize].to_vec(),
            })
        })
        .collect::<Result<Vec<_>, ObjectError>>()?;
    let p = Program {
        image,
        base_addr_canonical: base.ok_or(ObjectError::Missing("base"))?,
        entry_offset: entry.ok_or(ObjectError::Missing("entry"))?,
        symbols,
        data_segments,
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::super::assemble;
    use super::*;

    #[test]
    fn round_trip() {
        let src = format!(
            "main: call f\nhalt 0\nf: ret\n.data big \"{}\"",
            "x".repeat(70)
        );
        let p = assemble(&src).unwrap();
        let text = write_object(&p);
        assert!(text.starts_with("LFOBJ1\nbase 0x555555554000\nentry 0x0\n"));
        assert!(text
            .lines()
            .filter(|l| l.starts_with("img "))
            .all(|l| l.len() <= 4 + 64));
        assert_eq!(parse_object(&text).unwrap(), p);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(parse_object("nope"), Err(ObjectError::BadMagic));
        assert!(matches!(
            parse_object("LFOBJ1\nbase 0x0\nentry 0x0\nimg 0"),
            Err(ObjectError::Malformed(4, _))
        ));
        assert_eq!(
            parse_object("LFOBJ1\nentry 0x0\nimg 00"),
            Err(ObjectError::Missing("base"))
        );
        assert!(matches!(
            parse_object("LFOBJ1\nbase 0x0\nentry 0x5\nimg 00"),
            Err(ObjectError::Invalid(_))
        ));
    }
}
