use image::{Rgb, RgbImage};

use super::{entity_color, predicate_color, tool_glyph, EntityState, SceneState, BACKGROUND_COLOR, FLOOR_COLOR};
use crate::camera::CameraModel;

/// Convex hull (counter-clockwise in pixel coordinates) by the monotone chain.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).expect("finite pixel coordinates"));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

/// Fills a convex polygon; a pixel is painted when its centre lies inside.
pub fn fill_convex(img: &mut RgbImage, poly: &[[f64; 2]], color: [u8; 3]) {
    if poly.len() < 3 {
        return;
    }
    let (w, h) = img.dimensions();
    let minx = poly.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let maxx = poly.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil().min(w as f64) as u32;
    let miny = poly.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let maxy = poly.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil().min(h as f64) as u32;
    for y in miny..maxy {
        for x in minx..maxx {
            let c = [x as f64 + 0.5, y as f64 + 0.5];
            let inside = (0..poly.len()).all(|i| {
                let a = poly[i];
                let b = poly[(i + 1) % poly.len()];
                (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) >= 0.0
            });
            if inside {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

fn projected_hull(corners: &[[f64; 3]], cam: &CameraModel) -> Option<Vec<[f64; 2]>> {
    let pts: Option<Vec<[f64; 2]>> = corners.iter().map(|c| cam.project(*c)).collect();
    pts.map(|p| convex_hull(&p))
}

/// Binary silhouette of one entity rendered alone, row-major `H x W`.
pub fn entity_mask(e: &EntityState, cam: &CameraModel) -> Vec<bool> {
    let (h, w) = cam.image_size;
    let mut img = RgbImage::new(w as u32, h as u32);
    if let Some(hull) = projected_hull(&e.corners(), cam) {
        fill_convex(&mut img, &hull, [255, 255, 255]);
    }
    img.pixels().map(|p| p.0[0] == 255).collect()
}

pub(crate) fn render_view(state: &SceneState, cam: &CameraModel) -> RgbImage {
    let (h, w) = cam.image_size;
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb(BACKGROUND_COLOR));
    let floor = [[-2.5, -2.5, 0.0], [2.5, -2.5, 0.0], [2.5, 2.5, 0.0], [-2.5, 2.5, 0.0]];
    if let Some(hull) = projected_hull(&floor, cam) {
        fill_convex(&mut img, &hull, FLOOR_COLOR);
    }
    let mut items: Vec<(f64, EntityState, [u8; 3])> = state
        .entities
        .iter()
        .map(|e| (cam.project_h(e.centroid())[2], e.clone(), entity_color(e.id)))
        .collect();
    for p in &state.active {
        let tool = tool_glyph(&state.entities[p.actor as usize], &state.entities[p.target as usize], state.tool_size);
        items.push((cam.project_h(tool.centroid())[2], tool, predicate_color(p.predicate)));
    }
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite depth"));
    for (_, e, color) in &items {
        if let Some(hull) = projected_hull(&e.corners(), cam) {
            fill_convex(&mut img, &hull, *color);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_of_square_with_interior_point() {
        let h = convex_hull(&[[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 2.0]]);
        assert_eq!(h.len(), 4);
    }

    #[test]
    fn fill_square() {
        let mut img = RgbImage::new(4, 4);
        fill_convex(&mut img, &convex_hull(&[[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]]), [9, 9, 9]);
        let n = img.pixels().filter(|p| p.0 == [9, 9, 9]).count();
        assert_eq!(n, 4);
    }
}
