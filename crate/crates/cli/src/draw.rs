use image::{imageops, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_circle_mut, draw_line_segment_mut};

use crate::predictions::Row;

pub const QUERY: Rgb<u8> = Rgb([255, 220, 0]);
pub const TRUTH: Rgb<u8> = Rgb([40, 120, 255]);
pub const CORRECT: Rgb<u8> = Rgb([0, 200, 0]);
pub const WRONG: Rgb<u8> = Rgb([230, 0, 0]);

/// Places A and B side by side. Queries are drawn on A, ground truth as
/// rings on B, and predictions as dots joined to their query by a line
/// coloured by `correct`.
pub fn side_by_side(a: &RgbImage, b: &RgbImage, rows: &[Row], correct: &[bool]) -> RgbImage {
    let (wa, ha) = a.dimensions();
    let (wb, hb) = b.dimensions();
    let mut canvas = RgbImage::new(wa + wb, ha.max(hb));
    imageops::replace(&mut canvas, a, 0, 0);
    imageops::replace(&mut canvas, b, wa as i64, 0);
    let r = (ha.max(hb).min(wa.min(wb)) as i32 / 64).max(2);
    let off = wa as f32;
    for (row, &ok) in rows.iter().zip(correct) {
        let colour = if ok { CORRECT } else { WRONG };
        let q = (row.query_x as f32, row.query_y as f32);
        let p = (off + row.pred_x as f32, row.pred_y as f32);
        let g = (off + row.gt_x as f32, row.gt_y as f32);
        draw_line_segment_mut(&mut canvas, q, p, colour);
        draw_hollow_circle_mut(&mut canvas, (g.0.round() as i32, g.1.round() as i32), r + 1, TRUTH);
        draw_filled_circle_mut(&mut canvas, (q.0.round() as i32, q.1.round() as i32), r, QUERY);
        draw_filled_circle_mut(&mut canvas, (p.0.round() as i32, p.1.round() as i32), r, colour);
    }
    canvas
}
