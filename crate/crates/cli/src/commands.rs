use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use guided::boxes::BBox;
use guided::checkpoint::{read_checkpoint, write_checkpoint};
use guided::encoders::{
    encode_image, FeatureMapDirectory, FileTextEncoder, ImageInput, SpatialFeatureMap, SyntheticImageEncoder,
    TextEncoder,
};
use guided::eval::ablation::{run_ablation, score_dataset};
use guided::eval::benchmark::{generate_synthetic_benchmark, read_dataset, write_dataset, Dataset, Split};
use guided::eval::{evaluate_track, AnnotationResult, ApResult, ScoredBox};
use guided::fgad::fuse_with;
use guided::llm::{CommandBackend, LlmClient, ReplayBackend};
use guided::model::Detector;
use guided::training::{train_stage1, train_stage2, write_loss_log};
use guided::vocabulary::{
    build_vocabulary, HypernymLexicon, LlmSubjectParser, ParseCache, ParseStatus, RuleParser, SubjectParser,
};
use serde::{Deserialize, Serialize};

use crate::config::{Backend, ParserKind, PipelineConfig};
use crate::CliError;

pub const VOCABULARY_FILE: &str = "vocabulary.json";
pub const PARSE_CACHE_FILE: &str = "parse_cache.txt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_TABLE: &str = "results.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::other(e.to_string()))
}

fn read_names(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

#[derive(Serialize)]
struct VocabularyReport<'a> {
    counts: BTreeMap<&'static str, usize>,
    classes: &'a [guided::vocabulary::FineGrainedClass],
    parses: &'a [guided::vocabulary::SubjectParse],
    failures: &'a [guided::vocabulary::ParseFailure],
}

pub fn cmd_parse(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    let voc = &cfg.vocabulary;
    let names_path = voc
        .names
        .as_deref()
        .ok_or_else(|| CliError::config("parse needs --names or vocabulary.names"))?;
    let names = read_names(names_path)?;
    let parser: Box<dyn SubjectParser> = match voc.parser {
        ParserKind::Rules => Box::new(RuleParser),
        ParserKind::Replay => {
            let path = voc
                .transcript
                .as_deref()
                .ok_or_else(|| CliError::config("the replay parser needs a transcript"))?;
            let client = LlmClient::new(ReplayBackend::from_file(path)?, voc.client);
            Box::new(LlmSubjectParser::new(client, "replay"))
        }
        ParserKind::Command => {
            let (program, args) = voc
                .command
                .split_first()
                .ok_or_else(|| CliError::config("the command parser needs vocabulary.command"))?;
            let backend = CommandBackend::new(
                program.clone(),
                args.to_vec(),
                Duration::from_secs_f64(voc.client.timeout_secs),
            );
            Box::new(LlmSubjectParser::new(LlmClient::new(backend, voc.client), program.clone()))
        }
    };
    let lexicon = voc.lexicon.as_deref().map(HypernymLexicon::load).transpose()?;
    let cache_path = voc.cache.clone().unwrap_or_else(|| out.join(PARSE_CACHE_FILE));
    let cache = ParseCache::load_or_default(&cache_path)?;
    let build = build_vocabulary(&names, parser.as_ref(), Some(&cache), lexicon.as_ref())?;
    cache.save(&cache_path)?;

    let counts: BTreeMap<&'static str, usize> = [ParseStatus::Ok, ParseStatus::Hallucination, ParseStatus::OtherError]
        .into_iter()
        .map(|s| (s.as_str(), build.count(s)))
        .collect();
    let report = VocabularyReport {
        counts: counts.clone(),
        classes: &build.classes,
        parses: &build.parses,
        failures: &build.failures,
    };
    write_text(&out.join(VOCABULARY_FILE), &to_json(&report)?)?;
    println!(
        "parsed {} names: {} ok, {} hallucination, {} other_error",
        names.len(),
        counts["ok"],
        counts["hallucination"],
        counts["other_error"]
    );
    Ok(())
}

pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    let dataset = generate_synthetic_benchmark(&cfg.world)?;
    write_dataset(out, &dataset)?;
    let annotations: usize = dataset.images.iter().map(|i| i.annotations.len()).sum();
    println!(
        "wrote {} images ({} train, {} test) and {annotations} test annotations to {}",
        dataset.images.len(),
        dataset.split(Split::Train).count(),
        dataset.split(Split::Test).count(),
        out.display()
    );
    Ok(())
}

fn load_dataset(cfg: &PipelineConfig, dir: Option<&Path>) -> Result<Dataset, CliError> {
    Ok(match dir {
        Some(d) => read_dataset(d)?,
        None => generate_synthetic_benchmark(&cfg.world)?,
    })
}

/// Text and image encoders named by the config's backend.
enum Encoders {
    Synthetic(SyntheticImageEncoder),
    Files {
        text: FileTextEncoder,
        maps: FeatureMapDirectory,
    },
}

impl Encoders {
    fn new(cfg: &PipelineConfig, dataset: &Dataset) -> Result<Self, CliError> {
        match cfg.encoder.backend {
            Backend::Synthetic => Ok(Encoders::Synthetic(dataset.encoder())),
            Backend::Files => {
                let table = cfg
                    .encoder
                    .text_table
                    .as_deref()
                    .ok_or_else(|| CliError::config("the files backend needs encoder.text_table"))?;
                let maps = cfg
                    .encoder
                    .feature_maps
                    .as_deref()
                    .ok_or_else(|| CliError::config("the files backend needs encoder.feature_maps"))?;
                Ok(Encoders::Files {
                    text: FileTextEncoder::load(table)?,
                    maps: FeatureMapDirectory::new(maps),
                })
            }
        }
    }

    fn text(&self) -> &dyn TextEncoder {
        match self {
            Encoders::Synthetic(e) => e.text_encoder(),
            Encoders::Files { text, .. } => text,
        }
    }

    fn maps(&self, dataset: &Dataset, split: Split) -> Result<Vec<SpatialFeatureMap>, CliError> {
        match self {
            Encoders::Synthetic(e) => Ok(dataset.render(e, split)?),
            Encoders::Files { maps, .. } => dataset
                .split(split)
                .map(|img| encode_image(maps, &ImageInput::Precomputed(img.image_id.clone())).map_err(CliError::from))
                .collect(),
        }
    }
}

pub fn cmd_train(
    cfg: &PipelineConfig,
    out: &Path,
    stage: u8,
    dataset_dir: Option<&Path>,
    init: Option<&Path>,
) -> Result<(), CliError> {
    let dataset = load_dataset(cfg, dataset_dir)?;
    let enc = Encoders::new(cfg, &dataset)?;
    let maps = enc.maps(&dataset, Split::Train)?;
    let (detector, report) = if stage == 1 {
        if init.is_some() {
            return Err(CliError::config("stage 1 starts from the configured initialization; drop --init"));
        }
        let mut det = Detector::new(cfg.model.clone())?;
        let samples = dataset.stage1_samples(&maps, enc.text())?;
        let report = train_stage1(&mut det, &samples, &cfg.stage1)?;
        (det, report)
    } else {
        let init = init.ok_or_else(|| CliError::config("stage 2 needs --init with a stage-1 checkpoint"))?;
        let mut det = read_checkpoint(init)?;
        let samples = dataset.stage2_samples(&maps, enc.text())?;
        let coarse = if cfg.stage2.co_training {
            dataset.stage1_samples(&maps, enc.text())?
        } else {
            Vec::new()
        };
        let report = train_stage2(&mut det, &samples, &coarse, &cfg.stage2)?;
        (det, report)
    };
    let ckpt = out.join(format!("stage{stage}.ckpt"));
    write_checkpoint(&ckpt, &detector)?;
    write_loss_log(&out.join(format!("loss_stage{stage}.jsonl")), &report)?;
    match report.losses.last() {
        Some(r) => println!(
            "stage {stage}: {} iterations, final loss {:.6}; wrote {}",
            report.losses.len(),
            r.parts.total,
            ckpt.display()
        ),
        None => println!("stage {stage}: 0 iterations; wrote {}", ckpt.display()),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub s_coarse: Vec<f64>,
    pub s_fine: Vec<f64>,
    pub s_final: Vec<f64>,
}

/// One test annotation: its vocabulary, ground truth and every kept box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPredictions {
    pub image_id: String,
    pub track: String,
    #[serde(rename = "box")]
    pub gt_box: BBox,
    pub positive: usize,
    pub classes: Vec<String>,
    pub predictions: Vec<PredictionRecord>,
}

fn oracle_records(dataset: &Dataset) -> Vec<AnnotationPredictions> {
    dataset
        .split(Split::Test)
        .flat_map(|img| img.annotations.iter())
        .map(|ann| {
            let (classes, positive) = ann.vocabulary();
            let mut onehot = vec![0.0; classes.len()];
            onehot[positive] = 1.0;
            AnnotationPredictions {
                image_id: ann.image_id.clone(),
                track: ann.track.clone(),
                gt_box: ann.gt_box,
                positive,
                classes: classes.into_iter().map(|c| c.full_name).collect(),
                predictions: vec![PredictionRecord {
                    bbox: ann.gt_box,
                    s_coarse: onehot.clone(),
                    s_fine: onehot.clone(),
                    s_final: onehot,
                }],
            }
        })
        .collect()
}

pub fn cmd_detect(
    cfg: &PipelineConfig,
    out: &Path,
    dataset_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    oracle: bool,
) -> Result<(), CliError> {
    let dataset = load_dataset(cfg, dataset_dir)?;
    let records = if oracle {
        oracle_records(&dataset)
    } else {
        let path = checkpoint.ok_or_else(|| CliError::config("detect needs --checkpoint or --oracle"))?;
        let detector = read_checkpoint(path)?;
        let enc = Encoders::new(cfg, &dataset)?;
        let maps = enc.maps(&dataset, Split::Test)?;
        score_dataset(&detector, &dataset, &maps, enc.text(), &cfg.fusion)?
            .into_iter()
            .map(|a| AnnotationPredictions {
                predictions: a
                    .predictions
                    .into_iter()
                    .map(|p| PredictionRecord {
                        s_final: fuse_with(&cfg.fusion, &p.coarse, &p.fine),
                        bbox: p.bbox,
                        s_coarse: p.coarse,
                        s_fine: p.fine,
                    })
                    .collect(),
                image_id: a.image_id,
                track: a.track,
                gt_box: a.gt_box,
                positive: a.positive,
                classes: a.classes,
            })
            .collect()
    };
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::other(e.to_string()))?);
        text.push('\n');
    }
    let path = out.join(PREDICTIONS_FILE);
    write_text(&path, &text)?;
    println!("wrote {} annotation records to {}", records.len(), path.display());
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<AnnotationPredictions>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError {
                code: 3,
                message: format!("{} line {}: {e}", path.display(), i + 1),
            })
        })
        .collect()
}

fn results_table(r: &ApResult) -> String {
    let mut s = format!("{:<14} {:>8} {:>12} {:>12} {:>8}\n", "track", "AP", "annotations", "predictions", "TP");
    for (name, t) in &r.tracks {
        let _ = writeln!(
            s,
            "{:<14} {:>8.2} {:>12} {:>12} {:>8}",
            name,
            100.0 * t.ap,
            t.annotations,
            t.predictions,
            t.true_positives
        );
    }
    let _ = writeln!(s, "{:<14} {:>8.2}", "mAP", 100.0 * r.mean_ap);
    s
}

pub fn cmd_eval(cfg: &PipelineConfig, out: &Path, predictions: &Path) -> Result<(), CliError> {
    let records = read_predictions(predictions)?;
    let mut by_track: BTreeMap<String, Vec<AnnotationResult>> = BTreeMap::new();
    for r in records {
        if r.positive >= r.classes.len() {
            return Err(CliError {
                code: 3,
                message: format!("{}: positive index outside its vocabulary", r.image_id),
            });
        }
        by_track.entry(r.track).or_default().push(AnnotationResult {
            gt_box: r.gt_box,
            positive: r.positive,
            predictions: r
                .predictions
                .into_iter()
                .map(|p| ScoredBox {
                    bbox: p.bbox,
                    scores: p.s_final,
                })
                .collect(),
        });
    }
    let mut tracks = BTreeMap::new();
    for (name, results) in by_track {
        tracks.insert(name, evaluate_track(&results, cfg.eval.iou_threshold)?);
    }
    let result = ApResult::from_tracks(tracks);
    write_text(&out.join(RESULTS_JSON), &to_json(&result)?)?;
    let table = results_table(&result);
    write_text(&out.join(RESULTS_TABLE), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_ablate(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    let report = run_ablation(&cfg.ablation()?)?;
    write_text(&out.join(ABLATION_JSON), &to_json(&report)?)?;
    let table = report.table();
    write_text(&out.join(ABLATION_TABLE), &table)?;
    print!("{table}");
    Ok(())
}
