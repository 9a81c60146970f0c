use std::time::Instant;
use ldreg::data::{make_pair, FieldSpec, PhantomSpec};
use ldreg::metrics::{dice, evaluate};
use ldreg::train::{train_observed, IterationLosses, TrainConfig, TrainMode};

fn main() {
    let t0 = Instant::now();
    let phantom = PhantomSpec::default();
    let field = FieldSpec::default();
    let train: Vec<_> = (0..64).map(|i| make_pair(&phantom, &field, 10_000 + i).unwrap()).collect();
    let holdout: Vec<_> = (0..16).map(|i| make_pair(&phantom, &field, 20_000 + i).unwrap()).collect();
    println!("datasets in {:.0}s", t0.elapsed().as_secs_f64());

    let base: f64 = holdout.iter().map(|p| dice(&p.moving_mask, &p.fixed_mask).unwrap()).sum::<f64>() / 16.0;
    println!("baseline (unregistered) dice {:.3}", base);

    for (name, mode) in [("rec", TrainMode::RecOnly), ("aldk", TrainMode::Adversarial)] {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 150;
        cfg.mode = mode;
        if let TrainMode::RecOnly = cfg.mode { cfg.weights.gamma = 1.0; }
        let t1 = Instant::now();
        let (ckpt, log) = train_observed(&cfg, &train, |l: &IterationLosses| {
            if l.iteration % 25 == 0 {
                println!("  {name} iter {}  l_rec {:.4}  l_adv {:.4}  dis {:?}  critic {:?}", l.iteration, l.l_rec, l.l_adv, l.l_dis, l.critic);
            }
        }).unwrap();
        let rep = evaluate(&ckpt, &holdout, None).unwrap();
        println!("{name}: 150 iters in {:.0}s  dice {:.3} ± {:.3}  folding mean {:.1}  final l_rec {:.4}",
            t1.elapsed().as_secs_f64(), rep.dice.mean, rep.dice.std, rep.folding.mean, log.last().unwrap().l_rec);
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
