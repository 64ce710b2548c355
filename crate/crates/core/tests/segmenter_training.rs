//! Desk-scale segmenter training: loss must trend down on a 64-pair set and
//! the result must generalize to held-out phantoms.

use echodehaze::phantom::{generate_dataset, PhantomSpec};
use echodehaze::segmentation::{
    evaluate_dice, train_region_segmenter, LabeledPair, SegTrainConfig, SegWeights,
};

fn labeled_set(master_seed: u64, count: usize) -> Vec<LabeledPair> {
    let template = PhantomSpec { height: 32, width: 32, ..PhantomSpec::default() };
    generate_dataset(&template, count, master_seed)
        .unwrap()
        .into_iter()
        .map(|p| (p.hazy, p.ventricle_mask, p.septum_mask))
        .collect()
}

#[test]
fn loss_trends_down_and_generalizes_to_held_out_phantoms() {
    let train = labeled_set(21, 64);
    let config = SegTrainConfig { steps: 500, ..SegTrainConfig::default() };
    let (seg, record) = train_region_segmenter(&train, &config).unwrap();

    let early = record.losses[9];
    let late = *record.losses.last().unwrap();
    assert!(late < early, "loss did not fall: step-10 {early} vs step-500 {late}");

    let held_out = labeled_set(900, 64);
    let (dice_v, dice_s) = evaluate_dice(&seg, &held_out, SegWeights::default().theta).unwrap();
    assert!(dice_v >= 0.85, "held-out ventricle dice {dice_v} (septum {dice_s})");
}
