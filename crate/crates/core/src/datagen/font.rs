//! 5×7 bitmaps for the 36 drawable symbols.

use crate::codec::{Charset, NUM_CLASSES};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

#[rustfmt::skip]
const BITMAPS: [[&str; GLYPH_H]; NUM_CLASSES - 1] = [
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"], // a
    ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."], // b
    [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."], // c
    ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."], // d
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"], // e
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."], // f
    [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"], // g
    ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"], // h
    [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."], // i
    ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."], // j
    ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"], // k
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"], // l
    ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"], // m
    ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"], // n
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."], // o
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."], // p
    [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"], // q
    ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"], // r
    [".####", "#....", "#....", ".###.", "....#", "....#", "####."], // s
    ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."], // t
    ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."], // u
    ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."], // v
    ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."], // w
    ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"], // x
    ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."], // y
    ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"], // z
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."], // 0
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", "#####"], // 1
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"], // 2
    ["####.", "....#", "....#", ".###.", "....#", "....#", "####."], // 3
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."], // 4
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."], // 5
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."], // 6
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."], // 7
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."], // 8
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."], // 9
];

/// Binary bitmaps indexed by charset class.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlyphFont;

impl GlyphFont {
    /// Ink at bitmap cell (`row`, `col`), `None` for undrawable symbols.
    pub fn bitmap(&self, symbol: char) -> Option<[[bool; GLYPH_W]; GLYPH_H]> {
        let class = Charset.lookup(symbol)?;
        let rows = BITMAPS[class];
        let mut out = [[false; GLYPH_W]; GLYPH_H];
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                out[r][c] = ch == b'#';
            }
        }
        Some(out)
    }

    pub fn symbols(&self) -> impl Iterator<Item = char> {
        (0..NUM_CLASSES - 1).map(|i| Charset.symbol(i).expect("drawable class"))
    }

    /// Ink centroid in bitmap units (x, y), cell centres at `+0.5`.
    pub fn centroid(&self, symbol: char) -> Option<(f64, f64)> {
        let bm = self.bitmap(symbol)?;
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (r, row) in bm.iter().enumerate() {
            for (c, &on) in row.iter().enumerate() {
                if on {
                    sx += c as f64 + 0.5;
                    sy += r as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        Some((sx / n, sy / n))
    }
}
