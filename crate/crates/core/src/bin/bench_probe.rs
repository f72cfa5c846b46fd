use ndarray::Array2;
use std::time::Instant;

fn poly_exp(x: f64) -> f64 {
    // Taylor to degree 16, Horner. Valid on [-1, 1].
    const C: [f64; 17] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
        1.0 / 6227020800.0,
        1.0 / 87178291200.0,
        1.0 / 1307674368000.0,
        1.0 / 20922789888000.0,
    ];
    let mut acc = C[16];
    for i in (0..16).rev() {
        acc = acc * x + C[i];
    }
    acc
}

fn main() {
    let a_rows = 256;
    let f = 16;
    for d in [1280usize, 2560, 5120, 20480] {
        let a = Array2::<f64>::from_elem((a_rows, f), 0.1);
        let q = Array2::<f64>::from_elem((d, f), 0.05);
        let t0 = Instant::now();
        let iters = 20;
        let mut sink = 0.0;
        for _ in 0..iters {
            let s = a.dot(&q.t());
            sink += s[[0, 0]];
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let flops = 2.0 * a_rows as f64 * d as f64 * f as f64;
        println!(
            "gemm [{a_rows}x{f}]x[{f}x{d}]: {:.3} ms, {:.2} Gflop/s (sink {sink:.1})",
            dt * 1e3,
            flops / dt / 1e9
        );
    }

    let n = 1_310_720usize; // 256 x 5120
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 2.0 - 1.0).collect();
    let mut out = vec![0.0f64; n];

    let t0 = Instant::now();
    for (o, &x) in out.iter_mut().zip(&xs) {
        *o = std::hint::black_box(x).exp();
    }
    std::hint::black_box(&mut out);
    let dt_lib = t0.elapsed().as_secs_f64();
    println!("libm exp: {:.1} ms for {} elems ({:.2} ns/elem)", dt_lib * 1e3, n, dt_lib / n as f64 * 1e9);

    let t0 = Instant::now();
    for (o, &x) in out.iter_mut().zip(&xs) {
        *o = poly_exp(std::hint::black_box(x));
    }
    std::hint::black_box(&mut out);
    let dt_poly = t0.elapsed().as_secs_f64();
    println!("poly exp: {:.1} ms for {} elems ({:.2} ns/elem)", dt_poly * 1e3, n, dt_poly / n as f64 * 1e9);

    // accuracy of poly vs libm on [-1,1]
    let mut max_rel: f64 = 0.0;
    for i in 0..20001 {
        let x = -1.0 + 2.0 * (i as f64) / 20000.0;
        let r = (poly_exp(x) - x.exp()).abs() / x.exp();
        max_rel = max_rel.max(r);
    }
    println!("poly exp max rel err on [-1,1]: {max_rel:.3e}");
}
