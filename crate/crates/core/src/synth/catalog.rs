//! The six reference categories. Parts with the same name share their look
//! and their graph vertex across categories.

use super::{CategorySpec, PartSpec, Shape};
use crate::knowledge::Triple;

fn part(name: &str, shape: Shape, width: f64, height: f64) -> PartSpec {
    let color = match name {
        "hull" => [100, 112, 128],
        "deck" => [70, 70, 78],
        "shipbridge" => [196, 196, 206],
        "radar" => [226, 48, 40],
        "shipboard aircraft" => [240, 240, 236],
        "stock" => [128, 82, 40],
        "receiver" => [62, 62, 74],
        "barrel" => [28, 28, 30],
        "magazine" => [170, 120, 50],
        "sight" => [210, 200, 60],
        "cabin" => [112, 134, 60],
        "rotor" => [18, 18, 22],
        "tail boom" => [150, 168, 90],
        "skid" => [44, 44, 44],
        "fuselage" => [152, 158, 170],
        "wing" => [118, 126, 140],
        "tail" => [90, 98, 112],
        "cockpit" => [80, 200, 232],
        "turret" => [86, 102, 46],
        "track" => [30, 30, 30],
        "wheel" => [56, 56, 60],
        "cargo" => [194, 162, 102],
        "chassis" => [86, 86, 90],
        _ => [128, 128, 128],
    };
    PartSpec {
        name: name.to_string(),
        shape,
        width,
        height,
        color,
    }
}

fn rel(a: &str, r: &str, b: &str) -> (String, String, String) {
    (a.to_string(), r.to_string(), b.to_string())
}

pub fn default_catalog() -> Vec<CategorySpec> {
    use Shape::*;
    vec![
        CategorySpec {
            name: "aircraft-carrier".into(),
            parts: vec![
                part("hull", Rect, 40.0, 8.0),
                part("deck", Rect, 46.0, 3.0),
                part("shipbridge", Rect, 6.0, 9.0),
                part("radar", Ellipse, 4.0, 4.0),
                part("shipboard aircraft", TriangleRight, 7.0, 4.0),
            ],
            relations: vec![
                rel("deck", "is/top/of", "hull"),
                rel("deck", "is/adjacent/to", "hull"),
                rel("shipbridge", "is/top/of", "deck"),
                rel("shipbridge", "is/adjacent/to", "deck"),
                rel("radar", "is/top/of", "shipbridge"),
                rel("radar", "is/adjacent/to", "shipbridge"),
                rel("shipboard aircraft", "is/top/of", "deck"),
                rel("shipboard aircraft", "is/left/of", "shipbridge"),
            ],
        },
        CategorySpec {
            name: "pp-19".into(),
            parts: vec![
                part("stock", Rect, 12.0, 6.0),
                part("receiver", Rect, 16.0, 8.0),
                part("barrel", Rect, 14.0, 3.0),
                part("magazine", Rect, 5.0, 13.0),
                part("sight", Rect, 3.0, 3.0),
            ],
            relations: vec![
                rel("stock", "is/left/of", "receiver"),
                rel("stock", "is/adjacent/to", "receiver"),
                rel("barrel", "is/right/of", "receiver"),
                rel("barrel", "is/adjacent/to", "receiver"),
                rel("magazine", "is/below/of", "receiver"),
                rel("magazine", "is/adjacent/to", "receiver"),
                rel("sight", "is/top/of", "receiver"),
                rel("sight", "is/adjacent/to", "receiver"),
            ],
        },
        CategorySpec {
            name: "oh-58".into(),
            parts: vec![
                part("cabin", Ellipse, 18.0, 12.0),
                part("rotor", Rect, 38.0, 2.0),
                part("tail boom", Rect, 20.0, 3.0),
                part("skid", Rect, 20.0, 2.0),
            ],
            relations: vec![
                rel("rotor", "is/top/of", "cabin"),
                rel("rotor", "is/adjacent/to", "cabin"),
                rel("tail boom", "is/right/of", "cabin"),
                rel("tail boom", "is/adjacent/to", "cabin"),
                rel("skid", "is/below/of", "cabin"),
                rel("skid", "is/adjacent/to", "cabin"),
            ],
        },
        CategorySpec {
            name: "fa-18e-f".into(),
            parts: vec![
                part("fuselage", Ellipse, 38.0, 7.0),
                part("wing", TriangleUp, 18.0, 26.0),
                part("tail", TriangleUp, 9.0, 14.0),
                part("cockpit", Ellipse, 7.0, 4.0),
            ],
            relations: vec![
                rel("wing", "is/middle/of", "fuselage"),
                rel("fuselage", "is/front/of", "wing"),
                rel("tail", "is/left/of", "wing"),
                rel("tail", "is/adjacent/to", "fuselage"),
                rel("fuselage", "is/front/of", "tail"),
                rel("cockpit", "is/right/of", "wing"),
                rel("cockpit", "is/front/of", "fuselage"),
            ],
        },
        CategorySpec {
            name: "tank".into(),
            parts: vec![
                part("hull", Rect, 30.0, 8.0),
                part("turret", Rect, 14.0, 6.0),
                part("barrel", Rect, 16.0, 2.0),
                part("track", Rect, 34.0, 6.0),
                part("wheel", Ellipse, 5.0, 5.0),
            ],
            relations: vec![
                rel("turret", "is/top/of", "hull"),
                rel("turret", "is/adjacent/to", "hull"),
                rel("barrel", "is/right/of", "turret"),
                rel("barrel", "is/adjacent/to", "turret"),
                rel("track", "is/below/of", "hull"),
                rel("track", "is/adjacent/to", "hull"),
                rel("wheel", "is/middle/of", "track"),
                rel("wheel", "is/front/of", "track"),
            ],
        },
        CategorySpec {
            name: "truck".into(),
            parts: vec![
                part("cabin", Rect, 12.0, 12.0),
                part("cargo", Rect, 26.0, 15.0),
                part("chassis", Rect, 40.0, 3.0),
                part("wheel", Ellipse, 7.0, 7.0),
            ],
            relations: vec![
                rel("cabin", "is/right/of", "cargo"),
                rel("cabin", "is/adjacent/to", "cargo"),
                rel("chassis", "is/below/of", "cargo"),
                rel("chassis", "is/adjacent/to", "cargo"),
                rel("wheel", "is/below/of", "chassis"),
                rel("wheel", "is/adjacent/to", "chassis"),
            ],
        },
    ]
}

/// Wide context for the large scale: taxonomy and provenance facts that are
/// not visible in the images.
pub fn external_triples() -> Vec<Triple> {
    [
        ("aircraft-carrier", "is/a", "warship"),
        ("warship", "is/a", "ship"),
        ("ship", "operates/in", "sea"),
        ("fa-18e-f", "is/based/on", "aircraft-carrier"),
        ("fa-18e-f", "is/a", "fighter jet"),
        ("fighter jet", "is/a", "aircraft"),
        ("oh-58", "is/a", "helicopter"),
        ("helicopter", "is/a", "aircraft"),
        ("aircraft", "operates/in", "air"),
        ("pp-19", "is/a", "submachine gun"),
        ("submachine gun", "is/a", "firearm"),
        ("firearm", "is/carried/by", "infantry"),
        ("tank", "is/a", "armored vehicle"),
        ("armored vehicle", "is/a", "ground vehicle"),
        ("truck", "is/a", "ground vehicle"),
        ("truck", "is/used/for", "logistics"),
        ("ground vehicle", "operates/on", "land"),
        ("tank", "is/armed/with", "cannon"),
        ("pp-19", "country/of/origin", "russia"),
        ("oh-58", "country/of/origin", "usa"),
        ("fa-18e-f", "country/of/origin", "usa"),
        ("oh-58", "is/used/for", "reconnaissance"),
    ]
    .iter()
    .map(|(s, r, o)| Triple::new(s, r, o).expect("static triples are well formed"))
    .collect()
}
