use comad::config::Config;
use comad::teachers::{random_teacher, teacher_checkpoint, teacher_from_checkpoint, toy_pretrain};

#[test]
fn desk_pretraining_cuts_reconstruction_loss_by_a_third() {
    let cfg = Config::default();
    let data = cfg.training_data().unwrap();
    let mut t = random_teacher::<f32>(&cfg, 0).unwrap();
    let r = toy_pretrain(&mut t, &cfg, 0, &data).unwrap();
    assert!(r.reduction() >= 0.30, "{r:?}");

    let back = teacher_from_checkpoint(&teacher_checkpoint(&t, &cfg, r.steps as u64), &cfg).unwrap();
    assert_eq!(back, t);
}
