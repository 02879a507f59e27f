//! Ad-hoc throughput probe for the conv kernels (scaffolding aid).
use protograph::kernels::*;
use std::time::Instant;

fn bench_conv(b: usize, h: usize, w: usize, ic: usize, oc: usize, stride: usize, iters: usize) -> (f64, f64) {
    let g = ConvGeom::new(b, h, w, ic, 3, 3, oc, stride, 1);
    let input = vec![0.5; b * h * w * ic];
    let kernels = vec![0.01; 9 * ic * oc];
    let mut out = vec![0.0; g.out_rows() * oc];
    let t = Instant::now();
    let mut col = Vec::new();
    for _ in 0..iters {
        col = conv2d_forward(&g, &input, &kernels, &mut out);
    }
    let fwd = t.elapsed().as_secs_f64() / iters as f64;
    let og = vec![1.0; out.len()];
    let mut kg = vec![0.0; kernels.len()];
    let mut ig = vec![0.0; input.len()];
    let t = Instant::now();
    for _ in 0..iters {
        kg.fill(0.0); ig.fill(0.0);
        conv2d_backward(&g, &col, &kernels, &og, Some(&mut kg), Some(&mut ig));
    }
    let bwd = t.elapsed().as_secs_f64() / iters as f64;
    let macs = (g.out_rows() * g.patch_len() * oc) as f64;
    println!(
        "conv b{b} {h}x{w}x{ic}->{oc} s{stride}: fwd {:.3} ms ({:.1} GF/s)  bwd {:.3} ms ({:.1} GF/s)",
        fwd * 1e3, 2.0 * macs / fwd / 1e9, bwd * 1e3, 2.0 * 2.0 * macs / bwd / 1e9
    );
    (fwd, bwd)
}

fn main() {
    let (m, k, n) = (1024, 576, 64);
    let a = vec![0.5; m * k];
    let b = vec![0.25; k * n];
    let mut c = vec![0.0; m * n];
    let iters = 200;
    let t = Instant::now();
    for _ in 0..iters {
        c.fill(0.0);
        gemm(m, k, n, &a, &b, &mut c);
    }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("gemm {m}x{k}x{n}: {:.3} ms  {:.1} GF/s", dt * 1e3, 2.0 * (m * k * n) as f64 / dt / 1e9);
    let b2 = vec![0.25; m * n];
    let mut ct = vec![0.0; k * n];
    let t = Instant::now();
    for _ in 0..iters {
        ct.fill(0.0);
        gemm_tn(m, k, n, &a, &b2, &mut ct);
    }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("gemm_tn {m}x{k}x{n}: {:.3} ms  {:.1} GF/s", dt * 1e3, 2.0 * (m * k * n) as f64 / dt / 1e9);

    for &(w1, w2) in &[(16usize, 32usize), (8, 16), (4, 8)] {
        let mut t = 0.0;
        let (f, b) = bench_conv(16, 32, 32, 1, w1, 1, 20); // stem
        t += f + b;
        let (f, b) = bench_conv(16, 32, 32, w1, w1, 1, 10);
        t += 4.0 * (f + b);
        let (f, b) = bench_conv(16, 32, 32, w1, w2, 2, 10);
        t += f + b;
        let (f, b) = bench_conv(16, 16, 16, w2, w2, 1, 10);
        t += 3.0 * (f + b);
        let (f, b) = bench_conv(16, 16, 16, w2, 64, 2, 10);
        t += f + b;
        let (f, b) = bench_conv(16, 8, 8, 64, 64, 1, 10);
        t += 3.0 * (f + b);
        println!("==> widths [{w1},{w2},64]: conv time per 16-image step ≈ {:.1} ms\n", t * 1e3);
    }
}
