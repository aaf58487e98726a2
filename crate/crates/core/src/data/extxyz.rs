//! Extended XYZ reader and writer.
//!
//! ```text
//! <N>
//! Lattice="ax ay az bx by bz cx cy cz" Properties=species:S:1:pos:R:3 energy=<eV> pbc="T T T" tag=<label> ...
//! <Symbol> <x> <y> <z>     (N lines)
//! ```
//!
//! `Lattice` rows are lattice vectors. A lattice without `pbc` is periodic
//! along all axes. Comment keys without a dedicated field are kept in
//! [`Structure::properties`] and written back verbatim, in order.

use super::elements;
use super::{DataError, Result};
use crate::geometry::{Mat3, Structure};

const DEFAULT_PROPERTIES: &str = "species:S:1:pos:R:3";

fn err(line: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse { line, reason: reason.into() }
}

/// Splits a comment line into `key=value` pairs. Values may be quoted; a
/// bare key has an empty value.
fn tokenize(line: &str, line_no: usize) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.peek() != Some(&'=') {
            out.push((key, String::new()));
            continue;
        }
        chars.next();
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some(e) => value.push(e),
                        None => break,
                    },
                    '"' => {
                        closed = true;
                        break;
                    }
                    _ => value.push(c),
                }
            }
            if !closed {
                return Err(err(line_no, format!("unterminated quote in value of '{key}'")));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        if key.is_empty() {
            return Err(err(line_no, "empty key in comment line"));
        }
        out.push((key, value));
    }
    Ok(out)
}

fn parse_lattice(value: &str, line: usize) -> Result<Mat3> {
    let v: Vec<f64> = value
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(line, format!("malformed lattice \"{value}\"")))?;
    if v.len() != 9 {
        return Err(err(line, format!("malformed lattice: expected 9 numbers, got {}", v.len())));
    }
    Ok([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
}

fn parse_pbc(value: &str, line: usize) -> Result<[bool; 3]> {
    let flags: Vec<bool> = value
        .split_whitespace()
        .map(|t| match t {
            "T" | "True" | "true" | "1" => Ok(true),
            "F" | "False" | "false" | "0" => Ok(false),
            other => Err(err(line, format!("bad pbc flag '{other}'"))),
        })
        .collect::<Result<_>>()?;
    flags.try_into().map_err(|_| err(line, format!("pbc needs 3 flags, got \"{value}\"")))
}

/// Parses every frame in `text`.
pub fn parse_extxyz(text: &str) -> Result<Vec<Structure>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut k = 0;
    while k < lines.len() {
        if lines[k].trim().is_empty() {
            k += 1;
            continue;
        }
        let count_line = k + 1;
        let n: usize = lines[k]
            .trim()
            .parse()
            .map_err(|_| err(count_line, format!("bad atom count '{}'", lines[k].trim())))?;
        if n == 0 {
            return Err(err(count_line, "bad atom count: frame has zero atoms"));
        }
        let comment_line = k + 2;
        let comment = lines.get(k + 1).ok_or_else(|| err(comment_line, "missing comment line"))?;

        let mut cell = None;
        let mut pbc = None;
        let mut energy = None;
        let mut tag = None;
        let mut properties = Vec::new();
        for (key, value) in tokenize(comment, comment_line)? {
            match key.as_str() {
                "Lattice" => cell = Some(parse_lattice(&value, comment_line)?),
                "pbc" => pbc = Some(parse_pbc(&value, comment_line)?),
                "energy" => {
                    energy = Some(
                        value
                            .parse::<f64>()
                            .map_err(|_| err(comment_line, format!("bad energy '{value}'")))?,
                    )
                }
                "tag" => tag = Some(value),
                "Properties" if value == DEFAULT_PROPERTIES => {}
                _ => properties.push((key, value)),
            }
        }

        let mut species = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        for a in 0..n {
            let line_no = k + 3 + a;
            let line = lines
                .get(k + 2 + a)
                .ok_or_else(|| err(line_no, format!("bad count: expected {n} atom lines, file ended after {a}")))?;
            let mut tok = line.split_whitespace();
            let sym = tok.next().ok_or_else(|| err(line_no, "empty atom line"))?;
            let z = elements::atomic_number(sym).ok_or_else(|| err(line_no, format!("unknown element symbol '{sym}'")))?;
            let mut xyz = [0.0; 3];
            for c in &mut xyz {
                let t = tok.next().ok_or_else(|| err(line_no, "atom line needs symbol and 3 coordinates"))?;
                *c = t.parse().map_err(|_| err(line_no, format!("bad coordinate '{t}'")))?;
            }
            species.push(z);
            positions.push(xyz);
        }

        let periodic = match (pbc, cell.is_some()) {
            (Some(p), _) => p,
            (None, true) => [true; 3],
            (None, false) => [false; 3],
        };
        let mut s = Structure::new(species, positions, cell, periodic).map_err(|e| err(count_line, e.to_string()))?;
        s.ref_energy = energy;
        s.tag = tag;
        s.properties = properties;
        frames.push(s);
        k += 2 + n;
    }
    Ok(frames)
}

fn quote(value: &str) -> String {
    if !value.is_empty() && !value.contains(|c: char| c.is_whitespace() || c == '"' || c == '\\') {
        return value.to_string();
    }
    let escaped = value.replace('\\', "\\\\").replace('"', "\\\"");
    format!("\"{escaped}\"")
}

fn flag(b: bool) -> &'static str {
    if b {
        "T"
    } else {
        "F"
    }
}

/// Serializes frames; every float uses its shortest round-trip form.
pub fn write_extxyz(structures: &[Structure]) -> Result<String> {
    use std::fmt::Write;

    let mut out = String::new();
    for s in structures {
        let mut fields: Vec<String> = Vec::new();
        if let Some(c) = &s.cell {
            let flat: Vec<String> = c.iter().flatten().map(|v| v.to_string()).collect();
            fields.push(format!("Lattice=\"{}\"", flat.join(" ")));
        }
        if !s.properties.iter().any(|(k, _)| k == "Properties") {
            fields.push(format!("Properties={DEFAULT_PROPERTIES}"));
        }
        if let Some(e) = s.ref_energy {
            fields.push(format!("energy={e}"));
        }
        if s.cell.is_some() || s.is_periodic() {
            let [a, b, c] = s.periodic;
            fields.push(format!("pbc=\"{} {} {}\"", flag(a), flag(b), flag(c)));
        }
        if let Some(t) = &s.tag {
            fields.push(format!("tag={}", quote(t)));
        }
        for (k, v) in &s.properties {
            if v.is_empty() {
                fields.push(k.clone());
            } else {
                fields.push(format!("{k}={}", quote(v)));
            }
        }
        writeln!(out, "{}", s.n_atoms()).unwrap();
        writeln!(out, "{}", fields.join(" ")).unwrap();
        for (z, p) in s.species.iter().zip(&s.positions) {
            let sym = elements::symbol(*z)
                .ok_or_else(|| DataError::InvalidArgument(format!("no element symbol for Z={z}")))?;
            writeln!(out, "{sym} {} {} {}", p[0], p[1], p[2]).unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gold_atom() {
        let s = parse_extxyz("1\nenergy=-3.5\nAu 0 0 0\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].species, vec![79]);
        assert_eq!(s[0].ref_energy, Some(-3.5));
        assert!(!s[0].is_periodic());
    }

    #[test]
    fn lattice_implies_periodic() {
        let s = parse_extxyz("1\nLattice=\"10 0 0 0 10 0 0 0 10\"\nH 1 2 3\n").unwrap();
        assert_eq!(s[0].cell.unwrap(), [[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]]);
        assert!(s[0].is_fully_periodic());
    }

    #[test]
    fn explicit_pbc() {
        let text = "2\nLattice=\"5 0 0 0 5 0 0 0 20\" pbc=\"T T F\"\nC 0 0 0\nO 1 0 0\n";
        let s = parse_extxyz(text).unwrap();
        assert_eq!(s[0].periodic, [true, true, false]);
    }

    #[test]
    fn unknown_keys_survive() {
        let text = "1\nconfig_type=bulk Properties=species:S:1:pos:R:3 note=\"two words\" flag energy=1.5\nAu 0 0 0\n";
        let s = parse_extxyz(text).unwrap();
        assert_eq!(
            s[0].properties,
            vec![
                ("config_type".to_string(), "bulk".to_string()),
                ("note".to_string(), "two words".to_string()),
                ("flag".to_string(), String::new()),
            ]
        );
        let again = parse_extxyz(&write_extxyz(&s).unwrap()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("x\n\nH 0 0 0\n", 1, "bad atom count"),
            ("2\n\nH 0 0 0\n", 4, "bad count"),
            ("1\nLattice=\"1 2 3\"\nH 0 0 0\n", 2, "malformed lattice"),
            ("1\n\nQq 0 0 0\n", 3, "unknown element symbol"),
            ("1\n\nH 0 zero 0\n", 3, "bad coordinate"),
            ("1\nenergy=abc\nH 0 0 0\n", 2, "bad energy"),
        ];
        for (text, line, reason) in cases {
            match parse_extxyz(text) {
                Err(DataError::Parse { line: l, reason: r }) => {
                    assert_eq!(l, line, "{text:?}");
                    assert!(r.contains(reason), "{r} vs {reason}");
                }
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn multi_frame_roundtrip() {
        let a = Structure::molecule(vec![1, 8], vec![[0.1, -0.2, 0.3], [1.0 / 3.0, 0.0, 2.5e-7]])
            .unwrap()
            .with_energy(-12.125)
            .with_tag("in");
        let b = Structure::periodic(vec![79], vec![[0.0; 3]], [[4.08, 0.0, 0.0], [0.0, 4.08, 0.0], [0.0, 0.0, 4.08]])
            .unwrap()
            .with_tag("out of domain");
        let text = write_extxyz(&[a.clone(), b.clone()]).unwrap();
        let back = parse_extxyz(&text).unwrap();
        assert_eq!(back, vec![a, b]);
        assert_eq!(write_extxyz(&back).unwrap(), text);
    }
}
