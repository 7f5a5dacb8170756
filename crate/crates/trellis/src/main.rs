use std::time::Instant;
use trellis::kernels::{lstm_gates, matmul, matmul_acc};
use trellis::tensor::Tensor;
use trellis::DType;

fn bench<F: FnMut()>(label: &str, reps: usize, mut f: F) -> f64 {
    for _ in 0..reps / 5 + 1 {
        f();
    }
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{label}: {:.1} us", dt * 1e6);
    dt
}

fn main() {
    for &(n, k, m) in &[(4096usize, 64usize, 320usize), (1usize, 64, 320), (512, 512, 512)] {
        let a = Tensor::zeros(DType::Float32, &[n, k]);
        let b = Tensor::zeros(DType::Float32, &[k, m]);
        let reps = (600_000_000 / (2 * n * k * m)).max(20);
        let mut out = Tensor::zeros(DType::Float32, &[n, m]);
        let dt = bench(&format!("matmul_acc {n}x{k}x{m}"), reps, || {
            matmul_acc(std::hint::black_box(&a), &b, &mut out).unwrap();
        });
        println!("  = {:.1} GF/s", (2.0 * (n * k * m) as f64) / dt / 1e9);
        let dt = bench(&format!("matmul(alloc) {n}x{k}x{m}"), reps, || {
            std::hint::black_box(matmul(std::hint::black_box(&a), &b).unwrap());
        });
        println!("  = {:.1} GF/s", (2.0 * (n * k * m) as f64) / dt / 1e9);
    }

    bench("zeros [4096,320]", 200, || {
        std::hint::black_box(Tensor::zeros(DType::Float32, &[4096, 320]));
    });

    {
        let pre = Tensor::zeros(DType::Float32, &[4096, 320]);
        let c = Tensor::zeros(DType::Float32, &[4096, 64]);
        let dt = bench("lstm_gates 4096x64", 100, || {
            std::hint::black_box(lstm_gates(std::hint::black_box(&pre), &c, &c).unwrap());
        });
        println!("  = {:.1} ns/row", dt * 1e9 / 4096.0);
    }


    {
        use trellis::kernels::{ew_unary, UnaryOp};
        let x = Tensor::zeros(DType::Float32, &[4096 * 320]);
        let dt = bench("sigmoid flat 1.3M", 50, || {
            std::hint::black_box(ew_unary(UnaryOp::Sigmoid, std::hint::black_box(&x)).unwrap());
        });
        println!("  = {:.2} ns/elem", dt * 1e9 / (4096.0 * 320.0));
        let dt = bench("tanh flat 1.3M", 50, || {
            std::hint::black_box(ew_unary(UnaryOp::Tanh, std::hint::black_box(&x)).unwrap());
        });
        println!("  = {:.2} ns/elem", dt * 1e9 / (4096.0 * 320.0));
    }
    let d = 64usize;
    let w = Tensor::zeros(DType::Float32, &[d, 5 * d]);
    let cell = |b: usize, h: &Tensor, c: &Tensor| {
        let mut pre = Tensor::zeros(DType::Float32, &[b, 5 * d]);
        matmul_acc(h, &w, &mut pre).unwrap();
        matmul_acc(h, &w, &mut pre).unwrap();
        lstm_gates(&pre, c, c).unwrap()
    };
    let manual_in = (Tensor::zeros(DType::Float32, &[1, d]), Tensor::zeros(DType::Float32, &[1, d]));
    let tm = bench("manual tree (127 cells b=1)", 400, || {
        for _ in 0..127 {
            std::hint::black_box(cell(1, std::hint::black_box(&manual_in.0), &manual_in.1));
        }
    });
    let batched_in: Vec<(usize, Tensor, Tensor)> = (0..7)
        .map(|lvl| {
            let b = 64 * (64usize >> lvl);
            (
                b,
                Tensor::zeros(DType::Float32, &[b, d]),
                Tensor::zeros(DType::Float32, &[b, d]),
            )
        })
        .collect();
    let tb = bench("batched 64 trees (7 calls)", 100, || {
        for (b, h, c) in &batched_in {
            std::hint::black_box(cell(*b, std::hint::black_box(h), c));
        }
    }) / 64.0;
    println!("manual {: >8.1} us/tree, batched {:.1} us/tree, ratio {:.2}x", tm * 1e6, tb * 1e6, tm / tb * 1e0);
}
