// Temporary: measure edge-map IoU of phase-only reconstructions on sprites.
use posegraft_core::fourier::phase_only_reconstruct;
use posegraft_core::sprites::{actions, render, subjects};
use posegraft_core::tensor::ImageTensor;

fn edge_set(img: &ImageTensor, frac: f64) -> Vec<bool> {
    let lum = img.to_luminance();
    let (_, h, w) = lum.shape();
    let mut mag = vec![0.0; h * w];
    let mut maxm: f64 = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = lum.data[[0, y, x + 1]] - lum.data[[0, y, x - 1]];
            let gy = lum.data[[0, y + 1, x]] - lum.data[[0, y - 1, x]];
            let m = (gx * gx + gy * gy).sqrt();
            mag[y * w + x] = m;
            maxm = maxm.max(m);
        }
    }
    mag.iter().map(|&m| m > frac * maxm).collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let uni = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
    if uni == 0.0 { 0.0 } else { inter / uni }
}

fn main() {
    let subs = subjects();
    let acts = actions();
    let mut min_iou: f64 = f64::INFINITY;
    for i in 0..10 {
        let img = render(&subs[i % 8], &acts[(i * 3) % 15], 0);
        let rec = phase_only_reconstruct(&img).unwrap();
        let v = iou(&edge_set(&img, 0.2), &edge_set(&rec, 0.2));
        println!("sprite {i} (s{} a{}): edge IoU {:.4}", i % 8, (i * 3) % 15, v);
        min_iou = min_iou.min(v);
    }
    println!("min IoU over 10 sprites: {min_iou:.4}");
}
