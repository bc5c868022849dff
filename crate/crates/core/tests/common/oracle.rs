//! Independent re-derivation of gold answers from a question's decoded text.

use std::collections::HashSet;

use rlzero::taskgen::{Category, Question};

/// The chat template, with `\n` written out.
pub const TEMPLATE_HEAD: &str = "A conversation between User and Assistant. The user asks a question about the image, and the Assistant solves it. The assistant first thinks about the reasoning process in the mind and then provides the user with the answer.\n User: ";
pub const TEMPLATE_TAIL: &str = " \n Assistant: Let me solve this step by step.\n <think>";

#[derive(Debug, PartialEq)]
pub struct Obj {
    pub mark: Option<String>,
    pub name: String,
    pub x: i64,
    pub y: i64,
    pub depth: f64,
}

pub struct Parsed {
    pub objects: Vec<Obj>,
    pub question: Vec<String>,
    pub choices: Vec<(String, String)>,
}

pub fn parse(text: &str) -> Parsed {
    let rest = text.strip_prefix("scene: ").expect("scene prefix");
    let (scene, rest) = rest.split_once(" question: ").expect("question");
    let (question, choices) = rest.split_once(" choices: ").expect("choices");
    let objects = scene
        .split(" ;")
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .map(|entry| {
            let w: Vec<&str> = entry.split(' ').collect();
            let (mark, w) = if ["A", "B", "C", "D"].contains(&w[0]) {
                (Some(w[0].to_string()), &w[1..])
            } else {
                (None, &w[..])
            };
            assert_eq!(w.len(), 5, "entry {entry:?}");
            assert_eq!(w[3], "depth");
            Obj {
                mark,
                name: w[0].to_string(),
                x: w[1].parse().unwrap(),
                y: w[2].parse().unwrap(),
                depth: w[4].parse().unwrap(),
            }
        })
        .collect();
    let cw: Vec<&str> = choices.split(' ').collect();
    assert!(cw.len().is_multiple_of(2));
    Parsed {
        objects,
        question: question.split(' ').map(String::from).collect(),
        choices: cw
            .chunks(2)
            .map(|c| (c[0].to_string(), c[1].to_string()))
            .collect(),
    }
}

pub fn unique<'a>(objs: &'a [Obj], name: &str) -> &'a Obj {
    let found: Vec<&Obj> = objs.iter().filter(|o| o.name == name).collect();
    assert_eq!(found.len(), 1, "{name} must name exactly one object");
    found[0]
}

/// Indices of the choices that are correct for the parsed scene.
pub fn correct_choices(p: &Parsed) -> Vec<usize> {
    let q: Vec<&str> = p.question.iter().map(String::as_str).collect();
    let answers: Vec<&str> = p.choices.iter().map(|(_, c)| c.as_str()).collect();
    let hits = |pred: &dyn Fn(&str) -> bool| -> Vec<usize> {
        (0..answers.len()).filter(|&i| pred(answers[i])).collect()
    };
    match q.as_slice() {
        ["how", "many", name, "?"] => {
            let n = p.objects.iter().filter(|o| o.name == *name).count();
            hits(&|c| c.parse::<usize>().unwrap() == n)
        }
        ["where", "is", a, "relative", "to", b, "?"] => {
            let (a, b) = (unique(&p.objects, a), unique(&p.objects, b));
            let (dx, dy) = (a.x - b.x, a.y - b.y);
            assert_ne!(dx.abs(), dy.abs(), "ambiguous relation asked");
            let rel = if dx.abs() > dy.abs() {
                if dx < 0 {
                    "left"
                } else {
                    "right"
                }
            } else if dy < 0 {
                "above"
            } else {
                "below"
            };
            hits(&|c| c == rel)
        }
        ["which", "is", "closest", "?"] => {
            let depth = |c: &str| unique(&p.objects, c).depth;
            let best = answers
                .iter()
                .map(|c| depth(c))
                .fold(f64::INFINITY, f64::min);
            hits(&|c| depth(c) == best)
        }
        ["which", "is", "nearest", "to", r, "?"] => {
            let r = unique(&p.objects, r);
            let dist = |c: &str| {
                let o = unique(&p.objects, c);
                (o.x - r.x).abs() + (o.y - r.y).abs()
            };
            let best = answers.iter().map(|c| dist(c)).min().unwrap();
            hits(&|c| dist(c) == best)
        }
        other => panic!("unknown question {other:?}"),
    }
}

pub fn check(q: &Question) {
    let text = q.text();
    let p = parse(&text);

    // The text describes exactly the stored scene.
    assert_eq!(p.objects.len(), q.scene.objects.len());
    for (a, b) in p.objects.iter().zip(&q.scene.objects) {
        assert_eq!(
            (a.name.as_str(), a.x, a.y),
            (b.category.as_str(), b.x as i64, b.y as i64)
        );
        assert_eq!(a.depth, b.depth);
    }
    let cells: HashSet<(i64, i64)> = p.objects.iter().map(|o| (o.x, o.y)).collect();
    assert_eq!(cells.len(), p.objects.len(), "shared cell");
    for (i, a) in p.objects.iter().enumerate() {
        for b in &p.objects[i + 1..] {
            assert!((a.depth - b.depth).abs() >= 0.1);
        }
    }

    let letters: Vec<&str> = p.choices.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(letters, ["A", "B", "C", "D"][..letters.len()]);
    let answers: Vec<&String> = p.choices.iter().map(|(_, c)| c).collect();
    assert_eq!(answers, q.choices.iter().collect::<Vec<_>>());

    // Object-valued choices are marked in the scene with their letter.
    let mut marks: Vec<(String, String)> = p
        .objects
        .iter()
        .filter_map(|o| o.mark.clone().map(|m| (m, o.name.clone())))
        .collect();
    marks.sort();
    match q.category {
        Category::Depth | Category::Distance => assert_eq!(marks, p.choices),
        Category::Count | Category::Relation => assert!(marks.is_empty()),
    }

    let correct = correct_choices(&p);
    assert_eq!(correct, vec![q.gold], "{text}");
}
