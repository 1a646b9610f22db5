mod common;

use common::row_scene;
use finecontrol::pose_geometry::{Pose2D, StandingFigure};
use finecontrol::prompting::*;
use jsonschema::JSONSchema;
use proptest::prelude::*;
use serde_json::{json, Value};

fn valid_doc() -> Value {
    serde_json::to_value(row_scene(&["red", "green"], 64, 64, 0.75, 1.0, 3)).unwrap()
}

fn pointers(doc: &Value) -> Vec<String> {
    validate_scene_json(doc)
        .unwrap_err()
        .into_iter()
        .map(|v| v.pointer)
        .collect()
}

#[test]
fn scene_json_round_trips() {
    let scene = row_scene(&["red", "green", "blue"], 32, 64, 0.75, 0.8, 12);
    let doc = serde_json::to_value(&scene).unwrap();
    assert_eq!(validate_scene_json(&doc).unwrap(), scene);
    let text = serde_json::to_string_pretty(&scene).unwrap();
    assert_eq!(serde_json::from_str::<SceneSpec>(&text).unwrap(), scene);
}

#[test]
fn optional_fields_take_defaults() {
    let mut doc = valid_doc();
    for key in ["seed", "mode", "sampler", "harmony", "setting"] {
        doc.as_object_mut().unwrap().remove(key);
    }
    let scene = validate_scene_json(&doc).unwrap();
    assert_eq!(scene.sampler.steps, 20);
    assert_eq!(scene.harmony.tau, 0.001);
    assert_eq!(scene.harmony.hard_fraction, 0.25);
    assert_eq!(scene.setting, "");
}

#[test]
fn violations_carry_json_pointers() {
    let mut doc = valid_doc();
    doc["canvas"]["h"] = json!(30);
    doc["mode"] = json!("BLEND");
    doc["sampler"]["steps"] = json!(0);
    doc["harmony"]["tau"] = json!(-1.0);
    doc["instances"][1]["identity"] = json!("   ");
    doc["instances"][0]["pose"]["keypoints"][3] = json!([1.0, "a", 1]);
    doc["extra"] = json!(true);
    let mut got = pointers(&doc);
    got.sort();
    assert_eq!(
        got,
        [
            "/canvas/h",
            "/extra",
            "/harmony/tau",
            "/instances/0/pose/keypoints/3",
            "/instances/1/identity",
            "/mode",
            "/sampler/steps",
        ]
    );
}

#[test]
fn pose_rules_are_checked_against_the_canvas() {
    let mut doc = valid_doc();
    doc["instances"][0]["pose"]["keypoints"][0] = json!([70.0, 3.0, 1]);
    assert_eq!(pointers(&doc), ["/instances/0/pose/keypoints/0"]);
    doc["instances"][0]["pose"]["out_of_frame"] = json!(true);
    assert!(validate_scene_json(&doc).is_ok());

    let mut doc = valid_doc();
    doc["instances"][1]["pose"]["keypoints"]
        .as_array_mut()
        .unwrap()
        .pop();
    assert_eq!(pointers(&doc), ["/instances/1/pose/keypoints"]);

    let mut doc = valid_doc();
    doc["instances"] = json!([]);
    assert_eq!(pointers(&doc), ["/instances"]);
    assert_eq!(pointers(&json!([1, 2])), [""]);
    let missing = pointers(&json!({"version": 1}));
    assert_eq!(missing, ["/canvas", "/instances"]);
}

#[test]
fn pointer_tokens_are_escaped() {
    let mut doc = valid_doc();
    doc["a/b~c"] = json!(1);
    assert_eq!(pointers(&doc), ["/a~1b~0c"]);
}

fn mutate(doc: &mut Value, which: usize, value: Value) {
    let paths: [&[&str]; 10] = [
        &["canvas", "w"],
        &["seed"],
        &["mode"],
        &["sampler", "eta"],
        &["sampler", "steps"],
        &["harmony", "hard_fraction"],
        &["setting"],
        &["instances", "0", "identity"],
        &["instances", "1", "pose", "format"],
        &["version"],
    ];
    let mut cur = doc;
    for key in paths[which] {
        cur = match key.parse::<usize>() {
            Ok(i) => &mut cur[i],
            Err(_) => &mut cur[*key],
        };
    }
    *cur = value;
}

fn json_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(json!(null)),
        any::<bool>().prop_map(Value::from),
        (-5i64..5000).prop_map(Value::from),
        (-2.0f64..2.0).prop_map(Value::from),
        prop_oneof![
            Just("GLOBAL"),
            Just("COCO17"),
            Just(""),
            Just("x"),
            Just("OPENPOSE18")
        ]
        .prop_map(Value::from),
    ]
}

proptest! {
    // The hand-written checker must never accept what the published schema rejects.
    #[test]
    fn checker_is_at_least_as_strict_as_the_schema(
        edits in prop::collection::vec((0usize..10, json_value()), 1..4),
    ) {
        let schema = JSONSchema::compile(&scene_spec_schema()).unwrap();
        let mut doc = valid_doc();
        prop_assert!(schema.is_valid(&doc));
        for (which, value) in edits {
            mutate(&mut doc, which, value);
        }
        if !schema.is_valid(&doc) {
            prop_assert!(validate_scene_json(&doc).is_err());
        }
        if validate_scene_json(&doc).is_ok() {
            prop_assert!(schema.is_valid(&doc));
        }
    }

    #[test]
    fn positional_prompts_bind_regardless_of_pose_order(
        rot in 0usize..3,
        swap in any::<bool>(),
    ) {
        let xs = [10.0, 32.0, 54.0];
        let poses: Vec<Pose2D> = xs.iter().map(|&x| StandingFigure::new(x, 4.0, 40.0).pose()).collect();
        let mut order: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        if swap {
            order.swap(0, 1);
        }
        let listed: Vec<&Pose2D> = order.iter().map(|&i| &poses[i]).collect();
        let text = "a knight on the right, a wizard in the middle and an elf on the left, in a forest";
        let parsed = parse_global_prompt(text, &listed).unwrap();
        let names = ["an elf", "a wizard", "a knight"];
        for (k, (idx, identity)) in parsed.bindings.iter().enumerate() {
            prop_assert_eq!(*idx, k);
            prop_assert_eq!(identity.as_str(), names[order[k]]);
        }
        prop_assert_eq!(parsed.setting.as_str(), "in a forest");
    }
}

#[test]
fn unpositioned_clauses_fill_remaining_slots_left_to_right() {
    let poses: Vec<Pose2D> = [10.0, 32.0, 54.0]
        .iter()
        .map(|&x| StandingFigure::new(x, 4.0, 40.0).pose())
        .collect();
    let refs: Vec<&Pose2D> = poses.iter().collect();
    let parsed = parse_global_prompt("a cat, a dog in the middle, a fox", &refs).unwrap();
    let ids: Vec<&str> = parsed.bindings.iter().map(|b| b.1.as_str()).collect();
    assert_eq!(ids, ["a cat", "a dog", "a fox"]);
    assert_eq!(parsed.setting, "");
    assert!(matches!(
        parse_global_prompt("a cat fourth from the left, a dog, a fox", &refs),
        Err(PromptError::PositionOutOfRange { .. })
    ));
}

#[test]
fn global_prompt_orders_identities_by_position() {
    let mut scene = row_scene(&["red", "green", "blue"], 32, 64, 0.75, 1.0, 0);
    scene.instances.swap(0, 2);
    assert_eq!(scene.global_prompt(), "red, green, blue, on a beach");
    assert_eq!(scene.instance_prompt(0).unwrap(), "blue, on a beach");
    assert_eq!(split_clauses("a, b and c ,, d"), ["a", "b", "c", "d"]);
}
