use image::{Rgb, RgbImage};

use crate::boxes::BBox;

const PALETTE: [[u8; 3]; 5] = [
    [230, 60, 60],
    [255, 170, 30],
    [80, 200, 90],
    [60, 140, 255],
    [220, 80, 220],
];

/// 3x5 glyphs, one row per 3 bits, top row in the high bits.
fn glyph(c: char) -> u16 {
    let rows: [u8; 5] = match c.to_ascii_uppercase() {
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [6, 1, 2, 4, 7],
        '3' => [6, 1, 2, 1, 6],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 6, 1, 6],
        '6' => [3, 4, 7, 5, 7],
        '7' => [7, 1, 2, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 6],
        '.' => [0, 0, 0, 0, 2],
        _ => [0; 5],
    };
    rows.iter().fold(0, |acc, r| (acc << 3) | *r as u16)
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

pub fn class_color(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Text at `(x, y)`, each font pixel drawn as a `scale` square.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3], scale: i64) {
    for (i, c) in text.chars().enumerate() {
        let g = glyph(c);
        let ox = x + i as i64 * 4 * scale;
        for row in 0..5 {
            for col in 0..3 {
                if g >> (14 - (row * 3 + col)) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(img, ox + col * scale + dx, y + row * scale + dy, color);
                        }
                    }
                }
            }
        }
    }
}

pub fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3], thickness: i64) {
    let (x0, y0) = (b.x_min.round() as i64, b.y_min.round() as i64);
    let (x1, y1) = (b.x_max.round() as i64 - 1, b.y_max.round() as i64 - 1);
    for t in 0..thickness {
        for x in x0..=x1 {
            put(img, x, y0 + t, color);
            put(img, x, y1 - t, color);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, color);
            put(img, x1 - t, y, color);
        }
    }
}

/// Box plus `"<class> <confidence>"` above it.
pub fn annotate(img: &mut RgbImage, b: &BBox, class_id: usize, label: &str) {
    let color = class_color(class_id);
    draw_box(img, b, color, 2);
    let scale = if img.width().max(img.height()) >= 400 {
        2
    } else {
        1
    };
    let text_y = (b.y_min.round() as i64 - 6 * scale - 1).max(0);
    draw_text(img, b.x_min.round() as i64, text_y, label, color, scale);
}
