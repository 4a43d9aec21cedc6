//! Stroke skeletons for the supported alphabet (`A`-`Z`, `0`-`9`).
//!
//! Coordinates use a design grid with the cap line at `y = 0` and the
//! baseline at `y = 6`; `x` runs from 0 to the glyph's design width.

pub const CAP_UNITS: f64 = 6.0;

pub struct GlyphDef {
    pub width: f64,
    pub strokes: &'static [&'static [(f64, f64)]],
}

macro_rules! glyph {
    ($w:expr, [$([$(($x:expr, $y:expr)),* $(,)?]),* $(,)?]) => {
        GlyphDef { width: $w as f64, strokes: &[$(&[$(($x as f64, $y as f64)),*]),*] }
    };
}

const RING: &[(f64, f64)] = &[
    (1.0, 0.0),
    (3.0, 0.0),
    (4.0, 1.0),
    (4.0, 5.0),
    (3.0, 6.0),
    (1.0, 6.0),
    (0.0, 5.0),
    (0.0, 1.0),
    (1.0, 0.0),
];

pub fn glyph(ch: char) -> Option<GlyphDef> {
    let g = match ch {
        'A' => glyph!(4, [[(0, 6), (2, 0), (4, 6)], [(0.7, 4), (3.3, 4)]]),
        'B' => glyph!(
            4,
            [
                [(0, 6), (0, 0), (3, 0), (4, 0.8), (4, 2.2), (3, 3), (0, 3)],
                [(3, 3), (4, 3.8), (4, 5.2), (3, 6), (0, 6)],
            ]
        ),
        'C' => glyph!(
            4,
            [[
                (4, 0.8),
                (3, 0),
                (1, 0),
                (0, 1),
                (0, 5),
                (1, 6),
                (3, 6),
                (4, 5.2)
            ]]
        ),
        'D' => glyph!(
            4,
            [[
                (0, 0),
                (0, 6),
                (2.5, 6),
                (4, 4.5),
                (4, 1.5),
                (2.5, 0),
                (0, 0)
            ]]
        ),
        'E' => glyph!(4, [[(4, 0), (0, 0), (0, 6), (4, 6)], [(0, 3), (3, 3)]]),
        'F' => glyph!(4, [[(4, 0), (0, 0), (0, 6)], [(0, 3), (3, 3)]]),
        'G' => glyph!(
            4,
            [[
                (4, 0.8),
                (3, 0),
                (1, 0),
                (0, 1),
                (0, 5),
                (1, 6),
                (3, 6),
                (4, 5),
                (4, 3.2),
                (2.2, 3.2)
            ]]
        ),
        'H' => glyph!(4, [[(0, 0), (0, 6)], [(4, 0), (4, 6)], [(0, 3), (4, 3)]]),
        'I' => glyph!(2, [[(0, 0), (2, 0)], [(1, 0), (1, 6)], [(0, 6), (2, 6)]]),
        'J' => glyph!(4, [[(4, 0), (4, 5), (3, 6), (1, 6), (0, 5)]]),
        'K' => glyph!(
            4,
            [[(0, 0), (0, 6)], [(4, 0), (0, 3.5)], [(1.3, 2.6), (4, 6)]]
        ),
        'L' => glyph!(4, [[(0, 0), (0, 6), (4, 6)]]),
        'M' => glyph!(5, [[(0, 6), (0, 0), (2.5, 4), (5, 0), (5, 6)]]),
        'N' => glyph!(4, [[(0, 6), (0, 0), (4, 6), (4, 0)]]),
        'O' => GlyphDef {
            width: 4.0,
            strokes: &[RING],
        },
        'P' => glyph!(
            4,
            [[
                (0, 6),
                (0, 0),
                (3, 0),
                (4, 0.8),
                (4, 2.4),
                (3, 3.2),
                (0, 3.2)
            ]]
        ),
        'Q' => GlyphDef {
            width: 4.0,
            strokes: &[RING, &[(2.5, 4.5), (4.0, 6.0)]],
        },
        'R' => glyph!(
            4,
            [
                [
                    (0, 6),
                    (0, 0),
                    (3, 0),
                    (4, 0.8),
                    (4, 2.4),
                    (3, 3.2),
                    (0, 3.2)
                ],
                [(2, 3.2), (4, 6)]
            ]
        ),
        'S' => glyph!(
            4,
            [[
                (4, 0.8),
                (3, 0),
                (1, 0),
                (0, 0.8),
                (0, 2.2),
                (1, 3),
                (3, 3),
                (4, 3.8),
                (4, 5.2),
                (3, 6),
                (1, 6),
                (0, 5.2)
            ]]
        ),
        'T' => glyph!(4, [[(0, 0), (4, 0)], [(2, 0), (2, 6)]]),
        'U' => glyph!(4, [[(0, 0), (0, 5), (1, 6), (3, 6), (4, 5), (4, 0)]]),
        'V' => glyph!(4, [[(0, 0), (2, 6), (4, 0)]]),
        'W' => glyph!(5, [[(0, 0), (1.25, 6), (2.5, 2), (3.75, 6), (5, 0)]]),
        'X' => glyph!(4, [[(0, 0), (4, 6)], [(4, 0), (0, 6)]]),
        'Y' => glyph!(4, [[(0, 0), (2, 3), (4, 0)], [(2, 3), (2, 6)]]),
        'Z' => glyph!(4, [[(0, 0), (4, 0), (0, 6), (4, 6)]]),
        '0' => glyph!(
            3,
            [
                [
                    (1, 0),
                    (2, 0),
                    (3, 1),
                    (3, 5),
                    (2, 6),
                    (1, 6),
                    (0, 5),
                    (0, 1),
                    (1, 0)
                ],
                [(2.6, 1), (0.4, 5)]
            ]
        ),
        '1' => glyph!(3, [[(0.5, 1), (1.5, 0), (1.5, 6)], [(0, 6), (3, 6)]]),
        '2' => glyph!(
            4,
            [[(0, 1), (1, 0), (3, 0), (4, 1), (4, 2.3), (0, 6), (4, 6)]]
        ),
        '3' => glyph!(
            4,
            [
                [
                    (0, 0.8),
                    (1, 0),
                    (3, 0),
                    (4, 0.8),
                    (4, 2.2),
                    (3, 3),
                    (1.5, 3)
                ],
                [(3, 3), (4, 3.8), (4, 5.2), (3, 6), (1, 6), (0, 5.2)],
            ]
        ),
        '4' => glyph!(4, [[(3, 6), (3, 0), (0, 4.2), (4, 4.2)]]),
        '5' => glyph!(
            4,
            [[
                (4, 0),
                (0, 0),
                (0, 2.8),
                (3, 2.8),
                (4, 3.6),
                (4, 5.2),
                (3, 6),
                (1, 6),
                (0, 5.2)
            ]]
        ),
        '6' => glyph!(
            4,
            [[
                (3.5, 0),
                (1.5, 0),
                (0, 1.5),
                (0, 5),
                (1, 6),
                (3, 6),
                (4, 5),
                (4, 3.8),
                (3, 3),
                (0, 3)
            ]]
        ),
        '7' => glyph!(4, [[(0, 0), (4, 0), (1.5, 6)]]),
        '8' => glyph!(
            4,
            [[
                (1, 3),
                (0, 2.2),
                (0, 0.8),
                (1, 0),
                (3, 0),
                (4, 0.8),
                (4, 2.2),
                (3, 3),
                (1, 3),
                (0, 3.8),
                (0, 5.2),
                (1, 6),
                (3, 6),
                (4, 5.2),
                (4, 3.8),
                (3, 3)
            ]]
        ),
        '9' => glyph!(
            4,
            [[
                (4, 3),
                (1, 3),
                (0, 2.2),
                (0, 1),
                (1, 0),
                (3, 0),
                (4, 1),
                (4, 4.5),
                (2.5, 6),
                (0.5, 6)
            ]]
        ),
        _ => return None,
    };
    Some(g)
}

pub fn is_supported(ch: char) -> bool {
    glyph(ch).is_some()
}
