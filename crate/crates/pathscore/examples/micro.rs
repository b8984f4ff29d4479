use pathscore::bridge::*;
use pathscore::model::{builtin_model, BuiltinModel, FixedParams};
use std::time::Instant;

fn main() {
    let m = builtin_model(1, &FixedParams::new().with("kappa", 2.0).with("sigma", 0.3)).unwrap();
    let BuiltinModel::M1(m1) = &m else { panic!() };
    let aux = ConstSigmaAux::new(0.3);
    let theta = [-0.4, -0.5];
    let spu = 512usize;
    let dt = 1.0 / spu as f64;
    let z: Vec<f64> = (0..spu - 1).map(|i| ((i * 37 % 100) as f64 / 100.0 - 0.5) * 0.05).collect();
    let obs: Vec<f64> = (0..spu).map(|i| ((i * 53 % 100) as f64 / 100.0 - 0.5) * 0.08).collect();
    let reps = 4000usize;

    // scalar via enum
    let t0 = Instant::now();
    let mut acc = 0.0;
    for r in 0..reps {
        let x0 = 0.1 + (r % 7) as f64 * 0.1;
        let f = eval_bridge_block(&m, &aux, &theta, x0, &z, 1.1, &obs, dt).unwrap();
        acc += f.log_g;
    }
    println!("scalar enum:  {:.1} ns/step (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / (reps * spu) as f64);

    // scalar via concrete type
    let t0 = Instant::now();
    let mut acc = 0.0;
    for r in 0..reps {
        let x0 = 0.1 + (r % 7) as f64 * 0.1;
        let f = eval_bridge_block(m1, &aux, &theta, x0, &z, 1.1, &obs, dt).unwrap();
        acc += f.log_g;
    }
    println!("scalar conc:  {:.1} ns/step (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / (reps * spu) as f64);

    // batch via concrete type
    let t0 = Instant::now();
    let mut acc = 0.0;
    let mut out = [None; LANES];
    for r in 0..reps / LANES {
        let x0 = 0.1 + (r % 7) as f64 * 0.1;
        let starts = [x0, x0 + 0.05, x0 + 0.1, x0 + 0.15];
        eval_bridge_block_batch(m1, &aux, &theta, &starts, &z, 1.1, &obs, dt, &mut out);
        for f in out.iter().flatten() { acc += f.log_g; }
    }
    println!("batch conc:   {:.1} ns/step (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / (reps * spu) as f64);
}
