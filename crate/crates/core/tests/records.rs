use gazeswap_core::dataset_io::{
    duplicate_face_ids, parse_jsonl, read_jsonl, to_jsonl, write_jsonl, AnnotatedFace, AnnotationRecord, GazeDegrees,
    ImageAnnotation, IssueKind, Stage,
};
use gazeswap_core::matching::SwapMode;
use proptest::prelude::*;

fn face_strategy() -> impl Strategy<Value = AnnotatedFace> {
    (
        "[a-z]{1,6}[0-9]{0,3}",
        0.0..200.0f64,
        0.0..200.0f64,
        1.0..100.0f64,
        prop::option::of((-80.0..80.0f64, -80.0..80.0f64)),
        prop::bool::ANY,
    )
        .prop_map(|(id, x, y, w, gaze, eyes)| AnnotatedFace {
            face_id: id,
            bbox: [x, y, x + w, y + w],
            landmarks: (0..5).map(|k| [x + w * k as f64 / 5.0, y + w / 2.0]).collect(),
            gaze: gaze.map(|(pitch, yaw)| GazeDegrees { pitch, yaw }),
            provenance: None,
            mode: Some(if eyes { SwapMode::Eyes } else { SwapMode::Full }),
        })
}

proptest! {
    #[test]
    fn annotations_round_trip_through_jsonl(faces in prop::collection::vec(face_strategy(), 0..4)) {
        let mut faces = faces;
        for (i, f) in faces.iter_mut().enumerate() {
            f.face_id = format!("{}_{i}", f.face_id);
        }
        let rec = ImageAnnotation {
            image_id: "img".into(),
            image: "img.png".into(),
            width: 400,
            height: 400,
            faces,
        };
        let text = to_jsonl(std::slice::from_ref(&rec)).unwrap();
        let parsed = parse_jsonl::<ImageAnnotation>(text.as_bytes());
        prop_assert!(parsed.is_clean(), "{:?}", parsed.issues);
        prop_assert_eq!(&parsed.records[0], &rec);
    }

    #[test]
    fn label_records_round_trip(pitch in -90.0..90.0f64, yaw in -180.0..180.0f64, ts in 0u64..u64::MAX / 2) {
        let rec = AnnotationRecord {
            face_id: "f".into(),
            pitch,
            yaw,
            stage: Stage::CropAdjusted,
            editor: "ed".into(),
            timestamp: ts,
        };
        let parsed = parse_jsonl::<AnnotationRecord>(to_jsonl(std::slice::from_ref(&rec)).unwrap().as_bytes());
        prop_assert_eq!(&parsed.records[0], &rec);
    }
}

#[test]
fn file_round_trip_and_issue_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    let recs = vec![
        AnnotationRecord {
            face_id: "a".into(),
            pitch: 1.5,
            yaw: -2.25,
            stage: Stage::Preliminary,
            editor: "x".into(),
            timestamp: 1,
        },
        AnnotationRecord {
            face_id: "b".into(),
            pitch: 0.1,
            yaw: 0.2,
            stage: Stage::ContextAdjusted,
            editor: "y".into(),
            timestamp: 2,
        },
    ];
    write_jsonl(&path, &recs).unwrap();
    let back = read_jsonl::<AnnotationRecord>(&path).unwrap();
    assert_eq!(back.records, recs);
    assert_eq!(back.lines, vec![1, 2]);

    let text = concat!(
        r#"{"face_id":"a","pitch":1,"yaw":2,"stage":"preliminary","editor":"e","timestamp":3}"#,
        "\n\nnot json\n",
        r#"{"face_id":"","pitch":1,"yaw":2,"stage":"preliminary","editor":"e","timestamp":3}"#,
        "\n",
    );
    let parsed = parse_jsonl::<AnnotationRecord>(text.as_bytes());
    assert_eq!(parsed.records.len(), 1);
    assert_eq!(parsed.issues.len(), 2);
    assert_eq!(parsed.issues[0].line, 3);
    assert_eq!(parsed.issues[0].kind, IssueKind::Parse);
    assert_eq!(parsed.issues[1].line, 4);
    assert_eq!(parsed.issues[1].field.as_deref(), Some("face_id"));
}

#[test]
fn duplicate_faces_across_images_reported() {
    let face = |id: &str| AnnotatedFace {
        face_id: id.into(),
        bbox: [0.0, 0.0, 40.0, 40.0],
        landmarks: vec![[10.0, 10.0]; 5],
        gaze: None,
        provenance: None,
        mode: None,
    };
    let img = |id: &str, faces| ImageAnnotation {
        image_id: id.into(),
        image: format!("{id}.png"),
        width: 100,
        height: 100,
        faces,
    };
    let text = to_jsonl(&[img("i1", vec![face("a"), face("b")]), img("i2", vec![face("b")])]).unwrap();
    let parsed = parse_jsonl::<ImageAnnotation>(text.as_bytes());
    assert!(parsed.is_clean());
    let dups = duplicate_face_ids(&parsed);
    assert_eq!(dups.len(), 1);
    assert_eq!(dups[0].line, 2);
}
