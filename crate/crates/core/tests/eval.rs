use itov::blocks::BlockKind;
use itov::distortion::{DistortionKind, DistortionSpec};
use itov::eval::{
    crf_grid, embed_file, evaluate, extract_clip, extract_file, merge_reports, parse_distortion_list, sweep_crf,
    EvaluationReport,
};
use itov::media::{read_video, write_video, ClipDims, VideoClip};
use itov::net::{Message, NetConfig, WatermarkModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> WatermarkModel {
    WatermarkModel::new(NetConfig {
        channels: 4,
        depth: 1,
        ..NetConfig::new(8, ClipDims::new(4, 16, 16), BlockKind::Depthwise2d)
    })
    .unwrap()
}

fn clips(n: usize, frames: usize) -> Vec<VideoClip> {
    let d = ClipDims::new(frames, 16, 16);
    (0..n)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
            VideoClip::from_vec((0..d.elements()).map(|_| rng.gen_range(0.1..0.9)).collect(), d).unwrap()
        })
        .collect()
}

#[test]
fn report_covers_every_kind_and_is_reproducible() {
    let m = model();
    let specs = parse_distortion_list("all").unwrap();
    assert_eq!(specs.len(), 9);
    let a = evaluate(&m, &clips(2, 4), &specs, 5, "m", "d").unwrap();
    let b = evaluate(&m, &clips(2, 4), &specs, 5, "m", "d").unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    for kind in DistortionKind::ALL {
        let acc = a.accuracy(kind).unwrap();
        assert!((0.0..=100.0).contains(&acc), "{kind:?}");
    }
    assert!(a.psnr.unwrap() > 20.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    a.save(&path).unwrap();
    assert_eq!(EvaluationReport::load(&path).unwrap(), a);
    let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
    assert!(csv.starts_with("metric,distortion,value"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("bit_accuracy")).count(), 9);
}

#[test]
fn distortion_lists() {
    let two = parse_distortion_list("gaussian_blur, h264").unwrap();
    assert_eq!(two.iter().map(|s| s.kind()).collect::<Vec<_>>(), vec![DistortionKind::GaussianBlur, DistortionKind::H264]);
    assert!(parse_distortion_list("sharpen").is_err());
    assert!(evaluate(&model(), &[], &two, 0, "m", "d").is_err());
}

#[test]
fn crf_sweep_reports_each_point() {
    assert_eq!(crf_grid(18, 34, 8).unwrap(), vec![18, 26, 34]);
    assert!(crf_grid(30, 20, 1).is_err());
    assert!(crf_grid(0, 52, 1).is_err());
    assert!(crf_grid(0, 10, 0).is_err());
    let pts = sweep_crf(&model(), &clips(1, 4), &[18, 51], 1).unwrap();
    assert_eq!(pts.iter().map(|p| p.crf).collect::<Vec<_>>(), vec![18, 51]);
}

#[test]
fn embed_then_extract_through_a_file() {
    let m = model();
    let video = clips(1, 10).remove(0);
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("in.mkv"), dir.path().join("out.mkv"));
    write_video(&video, &src).unwrap();
    let msg = Message::from_hex("a5", 8).unwrap();
    embed_file(&m, &src, &msg, &dst).unwrap();
    let marked = read_video(&dst).unwrap();
    assert_eq!(marked.dims(), video.dims());
    // The two frames past the last full segment are copied unchanged.
    let tail = |c: &VideoClip| c.pixels().narrow(0, 8, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(tail(&marked), tail(&read_video(&src).unwrap()));

    let from_file = extract_file(&m, &dst).unwrap();
    assert_eq!(from_file.segments, 2);
    assert_eq!(from_file.bits.len(), 8);
    assert_eq!(from_file.margins.len(), 8);
    assert_eq!(from_file, extract_clip(&m, &marked).unwrap());
}

#[test]
fn merged_reports_share_columns() {
    let m = model();
    let c = clips(1, 4);
    let a = evaluate(&m, &c, &parse_distortion_list("identity,gaussian_blur").unwrap(), 1, "a", "d").unwrap();
    let b = evaluate(&m, &c, &[DistortionSpec::Identity], 1, "b", "d").unwrap();
    let merged = merge_reports(&[a, b]).unwrap();
    assert_eq!(merged.rows.len(), 2);
    let table = merged.to_table();
    assert!(table.contains('a') && table.contains('b'));
    assert_eq!(merged.to_csv().unwrap().lines().count(), 3);
}
