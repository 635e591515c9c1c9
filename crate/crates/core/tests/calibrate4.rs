// scratch attack-chain calibration; removed before release
use archvuln::archspace::ArchSpec;
use archvuln::data::{make_synthetic, SyntheticSpec};
use archvuln::evalkit::{accuracy, attack_success_rate};
use archvuln::netbuilder::{InitSpec, NetworkInstance, SkeletonConfig};
use archvuln::trainer::{self, TrainConfig};
use archvuln::triggergen::{GeneratorConfig, GeneratorInstance};
use std::time::Instant;

#[test]
#[ignore]
fn calibrate_attack_chain() {
    let spec = SyntheticSpec {
        num_classes: 8,
        train_per_class: 250,
        test_per_class: 50,
        ..Default::default()
    };
    let data = make_synthetic(&spec, 2026);
    let skel = SkeletonConfig::desk(8);
    let gcfg = GeneratorConfig::desk((8, 8));
    // conv-heavy candidate of the kind the search favors
    let arch = ArchSpec::parse(
        "|nor_conv_3x3~0|+|nor_conv_1x1~0|nor_conv_1x1~1|+|skip_connect~0|nor_conv_1x1~1|nor_conv_3x3~2|",
    )
    .unwrap();

    // criterion-8 style: clean train + generator train, bigger budget
    let t0 = Instant::now();
    let mut net = NetworkInstance::build_network(arch, skel, InitSpec::gaussian(81)).unwrap();
    let clean_cfg = TrainConfig { epochs: 8, batch_size: 96, seed: 82, ..Default::default() };
    trainer::train_clean(&mut net, &data.train, &clean_cfg).unwrap();
    let mut gen = GeneratorInstance::build(gcfg.clone(), InitSpec::gaussian(83)).unwrap();
    let gen_cfg = TrainConfig {
        mask_epochs: 3,
        mark_epochs: 10,
        batch_size: 96,
        seed: 84,
        ..Default::default()
    };
    trainer::train_generator(&mut gen, &mut net, &data.train, &gen_cfg).unwrap();
    let acc = accuracy(&mut net, &data.test).unwrap();
    let asr = attack_success_rate(&mut net, &mut gen, &data.test, 0).unwrap();
    println!("C8 candidate: acc={acc:.3} asr={asr:.3} ({:.1?})", t0.elapsed());

    // criterion-10 style: poisoned fine-tuning on a fresh clean split
    let fresh = make_synthetic(&spec, 9999).train;
    for &epochs in &[30usize, 50] {
        let mut results = Vec::new();
        let t0 = Instant::now();
        for &ratio in &[0.0f64, 0.001, 0.01] {
            let mut ft_net = net.clone();
            let ft_cfg = TrainConfig {
                epochs,
                seed: 86,
                ..TrainConfig::finetune_defaults()
            };
            let ft_data = if ratio > 0.0 {
                trainer::make_poisoned_dataset(&fresh, &mut gen, ratio, 0, 87).unwrap()
            } else {
                fresh.clone()
            };
            trainer::fine_tune(&mut ft_net, &ft_data, &ft_cfg).unwrap();
            let acc = accuracy(&mut ft_net, &data.test).unwrap();
            let asr = attack_success_rate(&mut ft_net, &mut gen, &data.test, 0).unwrap();
            results.push((ratio, acc, asr));
        }
        println!("C10 fine-tune {epochs} epochs ({:.1?}):", t0.elapsed());
        for (r, a, s) in &results {
            println!("   ratio={r}: acc={a:.3} asr={s:.3}");
        }
    }

    // criterion-11 style: retrain from scratch under a new seed
    let t0 = Instant::now();
    let retrain_cfg = TrainConfig { epochs: 8, batch_size: 96, seed: 88, ..Default::default() };
    let (mut rnet, _) =
        trainer::retrain_scratch(&arch, &gen, &data.train, &skel, &retrain_cfg).unwrap();
    let acc = accuracy(&mut rnet, &data.test).unwrap();
    let asr = attack_success_rate(&mut rnet, &mut gen, &data.test, 0).unwrap();
    println!("C11 retrained: acc={acc:.3} asr={asr:.3} chance=0.125 ({:.1?})", t0.elapsed());
}
