//! Renders every (task, strategy, step) prompt with placeholder field values
//! and pairs it with its golden file.

use std::path::PathBuf;

use indexmap::IndexMap;
use sce_core::dataset::Example;
use sce_core::prompts::{render_rationale_request, render_sce_request, render_step1, TargetLabel};
use sce_core::task::{Label, Strategy, TaskId, TaskSpec};

pub struct Case {
    pub name: String,
    pub rendered: String,
    pub golden: PathBuf,
}

fn placeholders(task: TaskId) -> &'static [(&'static str, &'static str)] {
    match task {
        TaskId::DiscrimEval => &[("scenario", "{SCENARIO}"), ("question", "{QUESTION}")],
        TaskId::FolkTexts => &[("description", "{DESCRIPTION}"), ("question", "{QUESTION}"), ("choices", "{CHOICES}")],
        TaskId::Sst2 => &[("review", "{MOVIE REVIEW}")],
        TaskId::Twitter => &[("post", "{TWITTER POST}")],
        TaskId::Gsm8k => &[("problem", "{PROBELM}")],
        TaskId::Mgnli => &[("premise", "{PREMISE}"), ("hypothesis", "{HYPOTHESIS}")],
    }
}

pub fn cases() -> Vec<Case> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut out = Vec::new();
    for task_id in TaskId::ALL {
        let task = TaskSpec::builtin(task_id);
        let fields: IndexMap<String, String> =
            placeholders(task_id).iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let example = Example { example_id: "golden".into(), fields, gold: None };
        let original = Label::from("<Original Answer>");
        let target = TargetLabel { value: Label::from("<Complement>"), source_prediction: original.clone() };
        for strategy in Strategy::ALL {
            let mut conv = render_step1(&task, &example, strategy).unwrap();
            let mut push = |name: &str, text: String| {
                out.push(Case {
                    name: format!("{task_id}.{strategy}.{name}"),
                    rendered: text,
                    golden: dir.join(format!("{task_id}.{strategy}.{name}.txt")),
                })
            };
            push("step1", conv.messages()[0].content.clone());
            conv.push_assistant("ANSWER: <Original Answer>").unwrap();
            if strategy == Strategy::RationaleBased {
                let req = render_rationale_request(&task, &original);
                push("rationale", req.clone());
                conv.push_user(req).unwrap();
                conv.push_assistant("RATIONALES:\n-").unwrap();
            }
            let step2 = render_sce_request(&task, strategy, &target, &conv).unwrap();
            push("step2", step2.last().unwrap().content.clone());
        }
    }
    out
}
