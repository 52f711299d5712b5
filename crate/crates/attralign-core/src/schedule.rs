//! Class-incremental step schedules.
//!
//! The three benchmark protocols are shipped as frozen class-name tables:
//! the target stream's step composition is part of the evaluation protocol,
//! not something to recompute at runtime (locale-dependent sorting would not
//! even reproduce the published order). `build_schedule` resolves the tables
//! against the caller's class list; names are matched case-insensitively
//! with `_`, `-` and spaces treated as the same separator.
//!
//! Classes of the input list that the protocol tables do not mention (one in
//! Office-31, five in Office-Home, six in Mini-DomainNet) stay out of every
//! target step; the source split still covers all C classes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Office31,
    OfficeHome,
    MiniDomainNet,
}

impl Benchmark {
    pub fn expected_class_count(&self) -> usize {
        match self {
            Benchmark::Office31 => 31,
            Benchmark::OfficeHome => 65,
            Benchmark::MiniDomainNet => 126,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Benchmark::Office31 => "office31",
            Benchmark::OfficeHome => "officehome",
            Benchmark::MiniDomainNet => "minidomainnet",
        }
    }

    pub fn parse(s: &str) -> Option<Benchmark> {
        match s {
            "office31" => Some(Benchmark::Office31),
            "officehome" => Some(Benchmark::OfficeHome),
            "minidomainnet" => Some(Benchmark::MiniDomainNet),
            _ => None,
        }
    }
}

pub const OFFICE31_STEPS: [&[&str]; 3] = [
    &[
        "back pack",
        "bike",
        "bike helmet",
        "bookcase",
        "bottle",
        "calculator",
        "desk chair",
        "desk lamp",
        "desktop computer",
        "file cabinet",
    ],
    &[
        "headphones",
        "keyboard",
        "laptop computer",
        "letter tray",
        "mobile phone",
        "monitor",
        "mouse",
        "mug",
        "paper notebook",
        "pen",
    ],
    &[
        "phone",
        "printer",
        "projector",
        "punchers",
        "ring binder",
        "ruler",
        "scissors",
        "speaker",
        "stapler",
        "tape dispenser",
    ],
];

pub const OFFICEHOME_STEPS: [&[&str]; 6] = [
    &[
        "Drill", "Exit Sign", "Bottle", "Glasses", "Computer", "File Cabinet", "Shelf", "Toys",
        "Sink", "Laptop",
    ],
    &[
        "Kettle", "Folder", "Keyboard", "Flipflops", "Pencil", "Bed", "Hammer", "ToothBrush",
        "Couch", "Bike",
    ],
    &[
        "Postit Notes",
        "Mug",
        "Webcam",
        "Desk Lamp",
        "Telephone",
        "Helmet",
        "Mouse",
        "Pen",
        "Monitor",
        "Mop",
    ],
    &[
        "Sneakers",
        "Notebook",
        "Backpack",
        "Alarm Clock",
        "Push Pin",
        "Paper Clip",
        "Batteries",
        "Radio",
        "Fan",
        "Ruler",
    ],
    &[
        "Pan",
        "Screwdriver",
        "Trash Can",
        "Printer",
        "Speaker",
        "Eraser",
        "Bucket",
        "Chair",
        "Calendar",
        "Calculator",
    ],
    &[
        "Flowers",
        "Lamp Shade",
        "Spoon",
        "Candles",
        "Clipboards",
        "Scissors",
        "TV",
        "Curtains",
        "Fork",
        "Soda",
    ],
];

pub const MINIDOMAINNET_STEPS: [&[&str]; 6] = [
    &[
        "aircraft carrier",
        "alarm clock",
        "ant",
        "anvil",
        "asparagus",
        "axe",
        "banana",
        "basket",
        "bathtub",
        "bear",
        "bee",
        "bird",
        "blackberry",
        "blueberry",
        "bottlecap",
        "broccoli",
        "bus",
        "butterfly",
        "cactus",
        "cake",
    ],
    &[
        "calculator",
        "camel",
        "camera",
        "candle",
        "cannon",
        "canoe",
        "carrot",
        "castle",
        "cat",
        "ceiling fan",
        "cello",
        "cell phone",
        "chair",
        "chandelier",
        "coffee cup",
        "compass",
        "computer",
        "cow",
        "crab",
        "crocodile",
    ],
    &[
        "cruise_ship",
        "dog",
        "dolphin",
        "dragon",
        "drums",
        "duck",
        "dumbbell",
        "elephant",
        "eyeglasses",
        "feather",
        "fence",
        "fish",
        "flamingo",
        "flower",
        "foot",
        "fork",
        "frog",
        "giraffe",
        "goatee",
        "grapes",
    ],
    &[
        "guitar",
        "hammer",
        "helicopter",
        "helmet",
        "horse",
        "kangaroo",
        "lantern",
        "laptop",
        "leaf",
        "lion",
        "lipstick",
        "lobster",
        "microphone",
        "monkey",
        "mosquito",
        "mouse",
        "mug",
        "mushroom",
        "onion",
        "panda",
    ],
    &[
        "peanut",
        "pear",
        "peas",
        "pencil",
        "penguin",
        "pig",
        "pillow",
        "pineapple",
        "potato",
        "power outlet",
        "purse",
        "rabbit",
        "raccoon",
        "rhinoceros",
        "rifle",
        "saxophone",
        "screwdriver",
        "sea turtle",
        "see saw",
        "sheep",
    ],
    &[
        "shoe",
        "skateboard",
        "snake",
        "speedboat",
        "spider",
        "squirrel",
        "strawberry",
        "streetlight",
        "string bean",
        "submarine",
        "swan",
        "table",
        "teapot",
        "teddy-bear",
        "television",
        "The Eiffel Tower",
        "The Great Wall of China",
        "tiger",
        "toe",
        "train",
    ],
];

pub fn protocol_steps(benchmark: Benchmark) -> &'static [&'static [&'static str]] {
    match benchmark {
        Benchmark::Office31 => &OFFICE31_STEPS,
        Benchmark::OfficeHome => &OFFICEHOME_STEPS,
        Benchmark::MiniDomainNet => &MINIDOMAINNET_STEPS,
    }
}

/// Canonical form for class-name matching: lowercase, separators unified.
pub fn normalize_class_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut last_space = true;
    for ch in name.chars() {
        let ch = match ch {
            '_' | '-' | ' ' => ' ',
            other => other,
        };
        if ch == ' ' {
            if !last_space {
                out.push(' ');
            }
            last_space = true;
        } else {
            for lower in ch.to_lowercase() {
                out.push(lower);
            }
            last_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Ordered disjoint class-index subsets defining the target stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub steps: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    pub benchmark_id: String,
}

impl StepSchedule {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn step_classes(&self, step: usize) -> &[usize] {
        &self.steps[step]
    }

    /// Class indices seen in steps `0..=step`, in step order.
    pub fn cumulative_classes(&self, step: usize) -> Vec<usize> {
        self.steps[..=step].iter().flatten().copied().collect()
    }

    /// Which step a class appears in, if any.
    pub fn step_of_class(&self, class: usize) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.contains(&class))
    }

    /// Input classes the protocol never assigns to a step.
    pub fn excluded_classes(&self) -> Vec<usize> {
        (0..self.class_names.len())
            .filter(|c| self.step_of_class(*c).is_none())
            .collect()
    }

    /// Step class names, resolved.
    pub fn step_class_names(&self, step: usize) -> Vec<String> {
        self.steps[step]
            .iter()
            .map(|&c| self.class_names[c].clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::config("schedule has no steps"));
        }
        let c = self.class_names.len();
        let mut seen = alloc::vec![false; c];
        for (t, step) in self.steps.iter().enumerate() {
            if step.is_empty() {
                return Err(Error::config(format!("step {t} has no classes")));
            }
            for &idx in step {
                if idx >= c {
                    return Err(Error::config(format!(
                        "step {t} references class {idx}, only {c} classes exist"
                    )));
                }
                if seen[idx] {
                    return Err(Error::config(format!(
                        "class {idx} appears in more than one step"
                    )));
                }
                seen[idx] = true;
            }
        }
        Ok(())
    }

    /// Evenly chunked schedule over the given classes, in index order.
    /// Used by the synthetic benchmark.
    pub fn chunked(class_names: Vec<String>, classes_per_step: usize) -> Result<Self> {
        if classes_per_step == 0 {
            return Err(Error::config("classes_per_step must be positive"));
        }
        if class_names.len() % classes_per_step != 0 {
            return Err(Error::config(format!(
                "{} classes do not split into steps of {}",
                class_names.len(),
                classes_per_step
            )));
        }
        let steps = (0..class_names.len())
            .collect::<Vec<_>>()
            .chunks(classes_per_step)
            .map(|c| c.to_vec())
            .collect();
        let schedule = StepSchedule {
            steps,
            class_names,
            benchmark_id: String::from("synthetic"),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Resolve a benchmark's protocol table against the caller's class list.
pub fn build_schedule(benchmark: Benchmark, class_names: &[String]) -> Result<StepSchedule> {
    let expected = benchmark.expected_class_count();
    if class_names.len() != expected {
        return Err(Error::config(format!(
            "{} expects {} classes, got {}",
            benchmark.id(),
            expected,
            class_names.len()
        )));
    }

    let mut lookup: Vec<(String, usize)> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (normalize_class_name(n), i))
        .collect();
    lookup.sort();
    for pair in lookup.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::config(format!(
                "class names '{}' and '{}' collide after normalization",
                class_names[pair[0].1], class_names[pair[1].1]
            )));
        }
    }
    let find = |name: &str| -> Result<usize> {
        let key = normalize_class_name(name);
        lookup
            .binary_search_by(|(k, _)| k.as_str().cmp(key.as_str()))
            .map(|pos| lookup[pos].1)
            .map_err(|_| {
                Error::config(format!(
                    "protocol class '{name}' not found in the provided class list"
                ))
            })
    };

    let mut steps = Vec::new();
    for table_step in protocol_steps(benchmark) {
        let mut step = Vec::with_capacity(table_step.len());
        for name in *table_step {
            step.push(find(name)?);
        }
        steps.push(step);
    }

    let schedule = StepSchedule {
        steps,
        class_names: class_names.to_vec(),
        benchmark_id: String::from(benchmark.id()),
    };
    schedule.validate()?;
    Ok(schedule)
}
