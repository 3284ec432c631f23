//! Brute-force reference implementations of the detection metrics.

#![allow(dead_code)]

/// Fraction of (outlier, inlier) pairs ranked correctly, ties counting half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Step-curve area from an explicit sweep over every distinct score: at
/// threshold `t` everything scoring at least `t` is selected.
/// `positives_high` selects high scores as the positive class.
pub fn sweep_aupr(scores: &[f64], labels: &[bool], positives_high: bool) -> f64 {
    let (s, l): (Vec<f64>, Vec<bool>) = if positives_high {
        (scores.to_vec(), labels.to_vec())
    } else {
        (scores.iter().map(|v| -v).collect(), labels.iter().map(|v| !v).collect())
    };
    let total = l.iter().filter(|&&x| x).count() as f64;
    let mut thresholds = s.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut area, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let selected: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| l[i]).count() as f64;
        let recall = tp / total;
        area += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    area
}

pub struct OverlapCase {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    pub predictions: Vec<Vec<bool>>,
    pub truths: Vec<Vec<bool>>,
    pub expected: f64,
}

pub struct RproCase {
    pub name: &'static str,
    pub maps: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub thresholds: usize,
    pub expected: f64,
}

/// 4x4 mask from a picture where `#` marks set pixels.
pub fn grid(rows: [&str; 4]) -> Vec<bool> {
    rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect()
}

/// Overlap fixtures with hand-counted answers.
pub fn overlap_cases() -> Vec<OverlapCase> {
    let block = grid(["###.", "###.", "###.", "...."]);
    vec![
        OverlapCase {
            name: "six of nine",
            height: 4,
            width: 4,
            predictions: vec![grid(["###.", "###.", "....", "...."])],
            truths: vec![block.clone()],
            expected: 6.0 / 9.0,
        },
        OverlapCase {
            name: "identical",
            height: 4,
            width: 4,
            predictions: vec![block.clone()],
            truths: vec![block.clone()],
            expected: 1.0,
        },
        OverlapCase {
            name: "disjoint",
            height: 4,
            width: 4,
            predictions: vec![grid(["...#", "...#", "...#", "####"])],
            truths: vec![block.clone()],
            expected: 0.0,
        },
        OverlapCase {
            name: "two regions averaged",
            height: 4,
            width: 4,
            predictions: vec![grid(["#...", "....", "..##", "..##"])],
            truths: vec![grid(["##..", "....", "..##", "..##"])],
            expected: 0.75,
        },
        OverlapCase {
            name: "diagonal neighbours are separate regions",
            height: 4,
            width: 4,
            predictions: vec![grid(["#...", "....", "....", "...."])],
            truths: vec![grid(["#...", ".#..", "....", "...."])],
            expected: 0.5,
        },
        OverlapCase {
            name: "images without regions do not count",
            height: 4,
            width: 4,
            predictions: vec![grid(["#...", "....", "....", "...."]), vec![true; 16]],
            truths: vec![grid(["##..", "##..", "....", "...."]), vec![false; 16]],
            expected: 0.25,
        },
        OverlapCase {
            name: "false positives outside do not matter",
            height: 4,
            width: 4,
            predictions: vec![grid(["...#", "#..#", "#...", "#.##"])],
            truths: vec![grid(["#...", "#...", "#...", "##.."])],
            expected: 3.0 / 5.0,
        },
    ]
}

/// Full rpro fixtures whose quantile thresholds were worked out by hand.
pub fn rpro_cases() -> Vec<RproCase> {
    let square = grid(["....", "....", "..##", "..##"]);
    let on = |m: &Vec<bool>, a: f64, b: f64| m.iter().map(|&p| if p { a } else { b }).collect::<Vec<f64>>();
    vec![
        // Median of twelve zeros and four ones is 0, so every pixel is selected.
        RproCase {
            name: "indicator map",
            maps: vec![on(&square, 1.0, 0.0)],
            masks: vec![square.clone()],
            thresholds: 1,
            expected: 1.0,
        },
        // Median of four zeros and twelve ones is 1, selecting only the background.
        RproCase {
            name: "inverted map",
            maps: vec![on(&square, 0.0, 1.0)],
            masks: vec![square.clone()],
            thresholds: 1,
            expected: 0.0,
        },
        // Pixel p scores p. Levels 0.25 and 0.75 give thresholds 3.75 and
        // 11.25: the first covers the square, the second keeps 14 and 15.
        RproCase {
            name: "ramp",
            maps: vec![(0..16).map(|p| p as f64).collect()],
            masks: vec![square],
            thresholds: 2,
            expected: 0.75,
        },
    ]
}
