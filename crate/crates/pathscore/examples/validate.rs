use pathscore::discretization::{coarsen_obs, simulate_hidden, simulate_observations, Grid};
use pathscore::estimation::kb_score_fd;
use pathscore::model::{builtin_model, BuiltinModel, FixedParams};
use pathscore::rng::StreamKey;
use pathscore::smoother_direct::run_alg1;
use pathscore::stats;

fn main() {
    let bm = builtin_model(1, &FixedParams::new().with("kappa", 2.0).with("sigma", 0.3)).unwrap();
    let BuiltinModel::M1(m1) = &bm else { panic!() };
    let theta = [-0.4, -0.5];
    let key = StreamKey::root(700);
    let grid = Grid::new(11, 2);
    let hidden = simulate_hidden(&bm, &theta, grid, &[0.2], key).unwrap();
    let obs = simulate_observations(&bm, &theta, &hidden, &[0.0], key);
    let ref11 = kb_score_fd(&bm, &theta, &obs, 0.2, 1e-5).unwrap();

    let n = 20_000usize;
    let reps = 8u64;
    for l in [3u32, 5, 7] {
        let obs_l = coarsen_obs(&obs, l).unwrap();
        let exact_l = kb_score_fd(&bm, &theta, &obs_l, 0.2, 1e-5).unwrap();
        let mut c0 = Vec::new();
        let mut c1 = Vec::new();
        for r in 0..reps {
            let k = StreamKey::root(701).child(l as u64).child(r);
            let est = run_alg1(m1, &theta, &obs_l, l, n, 2, &[0.2], k).unwrap();
            let v = &est.last().unwrap().values;
            c0.push(v[0]);
            c1.push(v[1]);
        }
        let (m0, m1v) = (stats::mean(&c0), stats::mean(&c1));
        let se = (stats::std_error(&c0).powi(2) + stats::std_error(&c1).powi(2)).sqrt();
        let bias2 = ((m0 - exact_l[0]).powi(2) + (m1v - exact_l[1]).powi(2)).sqrt();
        let bias_tot = ((m0 - ref11[0]).powi(2) + (m1v - ref11[1]).powi(2)).sqrt();
        let bias1 = ((exact_l[0] - ref11[0]).powi(2) + (exact_l[1] - ref11[1]).powi(2)).sqrt();
        println!("l={l}: disc-bias {bias1:.5}  particle-bias {bias2:.5} (se {se:.5})  total {bias_tot:.5}");
    }
}
