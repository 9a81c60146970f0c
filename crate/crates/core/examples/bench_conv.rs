// temporary micro-benchmark
use ldreg::kernels::*;
use std::time::Instant;

fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    (0..n).map(|_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 40) as f32 / 16777216.0) - 0.5 }).collect()
}

fn main() {
    // (ci, co, xd, s): student encoder layers + flow-head adjoint view + disc L6
    let cases: [(usize, usize, [usize;3], usize); 7] = [
        (2, 16, [32,32,32], 2),
        (16, 32, [16,16,16], 2),
        (32, 64, [8,8,8], 2),
        (64, 128, [4,4,4], 2),
        (3, 32, [32,32,32], 2),   // flow head: adjoint produces 3ch at 32^3
        (16, 64, [16,16,16], 2),  // tconv_c conv-view
        (128, 256, [2,2,2], 2),   // disc L6
    ];
    let mut total_t = 0.0; let mut total_f = 0.0;
    for (ci, co, xd, s) in cases {
        let g = ConvGeom::for_input(xd, [4,4,4], s);
        let x = rand_vec(ci*g.xn(), 1);
        let k = rand_vec(co*ci*g.kn(), 2);
        let gy = rand_vec(co*g.yn(), 3);
        let pk = pack_conv_kernel(&k, ci, co, g.k);
        let reps = 30;
        let t0 = Instant::now();
        for _ in 0..reps { std::hint::black_box(conv3d_packed(&x, &g, &pk)); }
        let tf = t0.elapsed().as_secs_f64()/reps as f64;
        let t0 = Instant::now();
        for _ in 0..reps { std::hint::black_box(conv3d_adjoint_packed(&gy, &g, &pk)); }
        let ta = t0.elapsed().as_secs_f64()/reps as f64;
        let t0 = Instant::now();
        for _ in 0..reps { std::hint::black_box(conv3d_kernel_grad_raw(&x, &gy, ci, co, &g)); }
        let tk = t0.elapsed().as_secs_f64()/reps as f64;
        let t0 = Instant::now();
        for _ in 0..reps { std::hint::black_box(pack_conv_kernel(&k, ci, co, g.k)); }
        let tp = t0.elapsed().as_secs_f64()/reps as f64;
        let flop = 2.0 * (g.yn()*ci*co*g.kn()) as f64;
        println!("ci={ci:3} co={co:3} xd={:2}  fwd {:7.3}ms ({:5.1} GF/s)  adj {:7.3}ms ({:5.1} GF/s)  kg {:7.3}ms ({:5.1} GF/s)  pack {:6.3}ms",
            xd[0], tf*1e3, flop/tf/1e9, ta*1e3, flop/ta/1e9, tk*1e3, flop/tk/1e9, tp*1e3);
        total_t += tf + ta + tk; total_f += 3.0*flop;
    }
    println!("aggregate (packed, cache-hot): {:.1} GFLOP/s", total_f/total_t/1e9);
}
