//! Parser for WKT `POLYGON` geometries in pixel coordinates.
//!
//! ```text
//! polygon = "POLYGON" "(" ring ("," ring)* ")"
//! ring    = "(" coord ("," coord)* ")"
//! coord   = number number
//! ```
//!
//! Whitespace is allowed between tokens, the keyword is case-insensitive and
//! numbers may use scientific notation. Every ring must be closed and list at
//! least four vertices.

use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// Exterior ring and holes, each closed (first vertex = last vertex).
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<Point>,
    pub holes: Vec<Vec<Point>>,
}

impl Polygon {
    pub fn rings(&self) -> impl Iterator<Item = &Vec<Point>> {
        std::iter::once(&self.exterior).chain(&self.holes)
    }

    /// Signed shoelace area of the exterior ring.
    pub fn exterior_area(&self) -> f64 {
        ring_area(&self.exterior)
    }

    /// WKT text; numbers print in shortest round-trip form.
    pub fn to_wkt(&self) -> String {
        let ring = |r: &Vec<Point>| {
            let pts: Vec<String> = r.iter().map(|(x, y)| format!("{x} {y}")).collect();
            format!("({})", pts.join(", "))
        };
        let rings: Vec<String> = self.rings().map(ring).collect();
        format!("POLYGON ({})", rings.join(", "))
    }
}

pub fn ring_area(ring: &[Point]) -> f64 {
    ring.windows(2)
        .map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1)
        .sum::<f64>()
        / 2.0
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Wkt {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => self.err(format!(
                "expected `{}`, found `{}`",
                c as char,
                got.escape_ascii()
            )),
            None => self.err(format!("expected `{}`, found end of input", c as char)),
        }
    }

    fn keyword(&mut self) -> Result<()> {
        self.skip_ws();
        const KW: &[u8] = b"POLYGON";
        let end = self.pos + KW.len();
        if end <= self.src.len() && self.src[self.pos..end].eq_ignore_ascii_case(KW) {
            self.pos = end;
            Ok(())
        } else {
            self.err("expected `POLYGON`")
        }
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        if i < s.len() && (s[i] == b'+' || s[i] == b'-') {
            i += 1;
        }
        let int_start = i;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        let mut digits = i - int_start;
        if i < s.len() && s[i] == b'.' {
            i += 1;
            let frac_start = i;
            while i < s.len() && s[i].is_ascii_digit() {
                i += 1;
            }
            digits += i - frac_start;
        }
        if digits == 0 {
            return self.err("expected a number");
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            let exp_start = j;
            while j < s.len() && s[j].is_ascii_digit() {
                j += 1;
            }
            if j == exp_start {
                self.pos = j;
                return self.err("exponent has no digits");
            }
            i = j;
        }
        let text = std::str::from_utf8(&s[start..i]).expect("ASCII number");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos = i;
                Ok(v)
            }
            _ => self.err(format!("number `{text}` is out of range")),
        }
    }

    fn ring(&mut self) -> Result<Vec<Point>> {
        let open = {
            self.skip_ws();
            self.pos
        };
        self.expect(b'(')?;
        let mut pts = Vec::new();
        loop {
            let x = self.number()?;
            let y = self.number()?;
            pts.push((x, y));
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                _ => return self.err("expected `,` or `)` after coordinate"),
            }
        }
        if pts.first() != pts.last() || pts.len() < 2 {
            return Err(Error::Wkt {
                offset: open,
                message: "ring is not closed (first vertex differs from last)".into(),
            });
        }
        if pts.len() < 4 {
            return Err(Error::Wkt {
                offset: open,
                message: format!("ring lists {} vertices, at least 4 are required", pts.len()),
            });
        }
        Ok(pts)
    }

    fn polygon(&mut self) -> Result<Polygon> {
        self.keyword()?;
        self.expect(b'(')?;
        let exterior = self.ring()?;
        let mut holes = Vec::new();
        loop {
            match self.peek() {
                Some(b',') => {
                    self.pos += 1;
                    holes.push(self.ring()?);
                }
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                _ => return self.err("expected `,` or `)` after ring"),
            }
        }
        if self.peek().is_some() {
            return self.err("trailing characters after polygon");
        }
        Ok(Polygon { exterior, holes })
    }
}

pub fn parse_wkt_polygon(text: &str) -> Result<Polygon> {
    parse_wkt_bytes(text.as_bytes())
}

/// Like [`parse_wkt_polygon`] on raw bytes; never panics.
pub fn parse_wkt_bytes(src: &[u8]) -> Result<Polygon> {
    Parser { src, pos: 0 }.polygon()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let p = parse_wkt_polygon("POLYGON ((0 0, 2 0, 2 2, 0 2, 0 0))").unwrap();
        assert_eq!(p.exterior.len(), 5);
        assert_eq!(p.exterior[2], (2.0, 2.0));
        assert!(p.holes.is_empty());
        assert_eq!(p.exterior_area(), 4.0);
    }

    #[test]
    fn unclosed_ring() {
        match parse_wkt_polygon("POLYGON((0 0,1 0,1 1))") {
            Err(Error::Wkt { offset, message }) => {
                assert_eq!(offset, 8);
                assert!(message.contains("not closed"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scientific_notation() {
        let p = parse_wkt_polygon("POLYGON ((0 0, 1e1 0, 10 10, 0 10, 0 0))").unwrap();
        assert_eq!(p.exterior[1], (10.0, 0.0));
        let p = parse_wkt_polygon("polygon((0 0,2.5E-1 0,1 1,-0 1,0 0))").unwrap();
        assert_eq!(p.exterior[1], (0.25, 0.0));
    }

    #[test]
    fn holes_and_whitespace() {
        let p = parse_wkt_polygon(
            "  POLYGON\n( (0 0, 10 0, 10 10, 0 10, 0 0) ,(2 2, 4 2, 4 4, 2 2) )  ",
        )
        .unwrap();
        assert_eq!(p.holes.len(), 1);
        assert_eq!(p.rings().count(), 2);
    }

    #[test]
    fn too_few_vertices() {
        let e = parse_wkt_polygon("POLYGON ((0 0, 1 1, 0 0))").unwrap_err();
        assert!(e.to_string().contains("at least 4"));
    }

    #[test]
    fn positioned_errors() {
        let cases = [
            ("POLYGN ((0 0))", 0),
            ("POLYGON ((0 0, 1 x", 17),
            ("POLYGON ((0 0, 1 0, 1 1, 0 0)) extra", 31),
            ("POLYGON ((0 0, 1e 0", 17),
            ("", 0),
        ];
        for (src, off) in cases {
            match parse_wkt_polygon(src) {
                Err(Error::Wkt { offset, .. }) => assert_eq!(offset, off, "{src}"),
                other => panic!("{src}: {other:?}"),
            }
        }
    }

    #[test]
    fn to_wkt_round_trip() {
        let src = "POLYGON ((0.125 3, 12.375 3, 12.375 9.5, 0.125 9.5, 0.125 3))";
        let p = parse_wkt_polygon(src).unwrap();
        assert_eq!(p.to_wkt(), src);
        assert_eq!(parse_wkt_polygon(&p.to_wkt()).unwrap(), p);
    }
}
