#include "hlm/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace hlm {

namespace {

void merge_json(nlohmann::json& base, const nlohmann::json& over) {
  if (!over.is_object() || !base.is_object()) {
    base = over;
    return;
  }
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object())
      merge_json(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(std::string("cannot open ") + what + ": " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path);
  out << content;
}

nlohmann::json hlm_config_to_json(const HlmConfig& c) {
  return {{"intra_layers", c.intra_layers},
          {"inter_layers", c.inter_layers},
          {"hidden", c.hidden},
          {"intra_intermediate", c.intra_intermediate},
          {"inter_intermediate", c.inter_intermediate},
          {"heads", c.heads},
          {"max_word_len", c.max_word_len},
          {"max_seq_len", c.max_seq_len},
          {"max_rel_dist_intra", c.max_rel_dist_intra},
          {"max_rel_dist_inter", c.max_rel_dist_inter},
          {"vocab_size", c.vocab_size}};
}

HlmConfig hlm_config_from_json(const nlohmann::json& j) {
  HlmConfig c;
  c.intra_layers = j.at("intra_layers").get<int>();
  c.inter_layers = j.at("inter_layers").get<int>();
  c.hidden = j.at("hidden").get<Eigen::Index>();
  c.intra_intermediate = j.at("intra_intermediate").get<Eigen::Index>();
  c.inter_intermediate = j.at("inter_intermediate").get<Eigen::Index>();
  c.heads = j.at("heads").get<Eigen::Index>();
  c.max_word_len = j.at("max_word_len").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.max_rel_dist_intra = j.at("max_rel_dist_intra").get<Eigen::Index>();
  c.max_rel_dist_inter = j.at("max_rel_dist_inter").get<Eigen::Index>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.dropout = 0.0;
  return c;
}

nlohmann::json seq2seq_config_to_json(const Seq2SeqConfig& c) {
  return {{"enc_layers", c.enc_layers},     {"dec_layers", c.dec_layers},
          {"hidden", c.hidden},             {"intermediate", c.intermediate},
          {"heads", c.heads},               {"num_buckets", c.num_buckets},
          {"max_distance", c.max_distance}, {"max_src_len", c.max_src_len},
          {"max_target_len", c.max_target_len}, {"beam_width", c.beam_width},
          {"num_sentinels", c.num_sentinels},   {"vocab_size", c.vocab_size}};
}

Seq2SeqConfig seq2seq_config_from_json(const nlohmann::json& j) {
  Seq2SeqConfig c;
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.hidden = j.at("hidden").get<Eigen::Index>();
  c.intermediate = j.at("intermediate").get<Eigen::Index>();
  c.heads = j.at("heads").get<Eigen::Index>();
  c.num_buckets = j.at("num_buckets").get<Eigen::Index>();
  c.max_distance = j.at("max_distance").get<Eigen::Index>();
  c.max_src_len = j.at("max_src_len").get<int>();
  c.max_target_len = j.at("max_target_len").get<int>();
  c.beam_width = j.at("beam_width").get<int>();
  c.num_sentinels = j.at("num_sentinels").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.dropout = 0.0;
  return c;
}

// Distinct deterministic RNG streams per purpose.
Rng init_rng(const ExperimentConfig& cfg) { return Rng(cfg.seed); }
Rng train_rng(const ExperimentConfig& cfg) { return Rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL); }

CharVocab load_vocab_artifact(const ExperimentConfig& cfg) {
  const std::string path = find_artifact(cfg.run_dir, "vocab");
  if (path.empty())
    throw DataError("no vocabulary in run dir " + cfg.run_dir + "; run build-vocab first");
  return CharVocab::load(path);
}

std::vector<CharGrid> corpus_windows(const Treebank& tb, const CharVocab& vocab,
                                     int max_word_len, int max_seq_len) {
  std::vector<CharGrid> out;
  for (const auto& s : tb.sentences)
    for (const EncodedSentence& enc : encode_sentence(s, vocab, max_word_len, max_seq_len))
      out.push_back(CharGrid::from_words(enc.words, max_word_len));
  return out;
}

Checkpoint load_checkpoint_checked(const ExperimentConfig& cfg, const std::string& path,
                                   const std::vector<std::string>& kinds) {
  Checkpoint ckpt = Checkpoint::load(path);
  bool kind_ok = false;
  for (const auto& k : kinds) kind_ok = kind_ok || ckpt.kind == k;
  if (!kind_ok)
    throw DataError("checkpoint " + path + " has kind '" + ckpt.kind + "', expected one of " +
                    [&] {
                      std::string s;
                      for (const auto& k : kinds) s += k + " ";
                      return s;
                    }());
  if (ckpt.language != cfg.language)
    throw DataError("checkpoint " + path + " was trained for language '" + ckpt.language +
                    "', refusing to use it for '" + cfg.language + "'");
  return ckpt;
}

std::string required_checkpoint(const ExperimentConfig& cfg, const std::string& explicit_path,
                                const std::string& role) {
  if (!explicit_path.empty()) return explicit_path;
  const std::string found = find_artifact(cfg.run_dir, role);
  if (found.empty())
    throw DataError("no checkpoint given and no '" + role + "' artifact recorded in " +
                    cfg.run_dir);
  return found;
}

FeatureSchema schema_from_json(const nlohmann::json& j) {
  FeatureSchema s;
  s.categories = j.at("categories").get<std::vector<std::string>>();
  for (const auto& vals : j.at("values"))
    s.values.push_back(vals.get<std::vector<std::string>>());
  return s;
}

nlohmann::json schema_to_json(const FeatureSchema& s) {
  return {{"categories", s.categories}, {"values", s.values}};
}

std::vector<LemmaExample> lemma_pairs(const Treebank& tb, const ExtVocab& vocab,
                                      int max_target_len) {
  std::vector<LemmaExample> out;
  for (const auto& s : tb.sentences)
    for (const auto& t : s.tokens)
      out.push_back(make_lemma_example(t.form, t.lemma, t.upos, vocab, max_target_len));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

nlohmann::json ExperimentConfig::defaults() {
  return nlohmann::json{
      {"language", ""},
      {"seed", 42},
      {"run_dir", "runs/run"},
      {"data", {{"train", ""}, {"valid", ""}, {"test", ""}}},
      {"model",
       {{"hidden", 768},
        {"heads", 12},
        {"intra_intermediate", 1536},
        {"inter_intermediate", 3072},
        {"generator", {{"intra_layers", 3}, {"inter_layers", 6}}},
        {"discriminator", {{"intra_layers", 4}, {"inter_layers", 12}}},
        {"max_word_len", 16},
        {"max_seq_len", 512},
        {"max_rel_dist_intra", 16},
        {"max_rel_dist_inter", 512},
        {"dropout", 0.1}}},
      {"pretrain",
       {{"objective", "rtd"},
        {"epochs", 30},
        {"batch_size", 16},
        {"learning_rate", 1e-5},
        {"schedule", "constant"},
        {"warmup_proportion", 0.1},
        {"mask_rate", 0.15},
        {"mask_strategy", "char_ngram"},
        {"rtd_lambda", 50.0},
        {"weight_decay", 0.01},
        {"optimizer", "adam"},
        {"use_dropout", true}}},
      {"finetune",
       {{"learning_rate", 2e-5},
        {"weight_decay", 0.01},
        {"batch_size", 16},
        {"patience", 10},
        {"max_epochs", 100},
        {"head_hidden", 0},
        {"freeze_encoder", false}}},
      {"seq2seq",
       {{"enc_layers", 12},
        {"dec_layers", 12},
        {"hidden", 768},
        {"intermediate", 2048},
        {"heads", 12},
        {"dropout", 0.0},
        {"num_buckets", 32},
        {"max_distance", 128},
        {"max_src_len", 512},
        {"max_target_len", 30},
        {"beam_width", 20},
        {"num_sentinels", 32},
        {"pretrain",
         {{"epochs", 100},
          {"batch_size", 16},
          {"learning_rate", 1e-5},
          {"schedule", "cosine"},
          {"warmup_steps", 1000},
          {"mask_rate", 0.15},
          {"mean_span", 3.0},
          {"optimizer", "adamwscale"},
          {"weight_decay", 0.0}}},
        {"finetune",
         {{"learning_rate", 1e-3},
          {"weight_decay", 0.01},
          {"batch_size", 16},
          {"patience", 10},
          {"max_epochs", 100},
          {"validation_beam_width", 20}}}}}};
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw DataError("override must be key.path=value, got: " + assignment);
  std::string pointer = "/" + assignment.substr(0, eq);
  for (auto& c : pointer)
    if (c == '.') c = '/';
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // plain string
  }
  j[nlohmann::json::json_pointer(pointer)] = value;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.resolved = j;
  cfg.language = j.at("language").get<std::string>();
  if (cfg.language.empty()) throw DataError("config: language must be set");
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.run_dir = j.at("run_dir").get<std::string>();
  cfg.train_path = j.at("data").at("train").get<std::string>();
  cfg.valid_path = j.at("data").at("valid").get<std::string>();
  cfg.test_path = j.at("data").at("test").get<std::string>();

  const auto& m = j.at("model");
  auto fill_model = [&](HlmConfig& c, const char* which) {
    c.hidden = m.at("hidden").get<Eigen::Index>();
    c.heads = m.at("heads").get<Eigen::Index>();
    c.intra_intermediate = m.at("intra_intermediate").get<Eigen::Index>();
    c.inter_intermediate = m.at("inter_intermediate").get<Eigen::Index>();
    c.intra_layers = m.at(which).at("intra_layers").get<int>();
    c.inter_layers = m.at(which).at("inter_layers").get<int>();
    c.max_word_len = m.at("max_word_len").get<int>();
    c.max_seq_len = m.at("max_seq_len").get<int>();
    c.max_rel_dist_intra = m.at("max_rel_dist_intra").get<Eigen::Index>();
    c.max_rel_dist_inter = m.at("max_rel_dist_inter").get<Eigen::Index>();
    c.dropout = m.at("dropout").get<double>();
  };
  fill_model(cfg.generator, "generator");
  fill_model(cfg.discriminator, "discriminator");

  const auto& p = j.at("pretrain");
  cfg.pretrain.objective = p.at("objective").get<std::string>();
  cfg.pretrain.epochs = p.at("epochs").get<int>();
  cfg.pretrain.batch_size = p.at("batch_size").get<int>();
  cfg.pretrain.learning_rate = p.at("learning_rate").get<double>();
  cfg.pretrain.schedule = p.at("schedule").get<std::string>();
  cfg.pretrain.warmup_proportion = p.at("warmup_proportion").get<double>();
  cfg.pretrain.mask_rate = p.at("mask_rate").get<double>();
  cfg.pretrain.strategy = mask_strategy_from_string(p.at("mask_strategy").get<std::string>());
  cfg.pretrain.rtd_lambda = p.at("rtd_lambda").get<double>();
  cfg.pretrain.weight_decay = p.at("weight_decay").get<double>();
  cfg.pretrain.optimizer = opt_kind_from_string(p.at("optimizer").get<std::string>());
  cfg.pretrain_dropout = p.at("use_dropout").get<bool>();

  const auto& f = j.at("finetune");
  cfg.finetune.learning_rate = f.at("learning_rate").get<double>();
  cfg.finetune.weight_decay = f.at("weight_decay").get<double>();
  cfg.finetune.batch_size = f.at("batch_size").get<int>();
  cfg.finetune.patience = f.at("patience").get<int>();
  cfg.finetune.max_epochs = f.at("max_epochs").get<int>();
  cfg.finetune.head_hidden = f.at("head_hidden").get<Eigen::Index>();
  cfg.finetune.freeze_encoder = f.at("freeze_encoder").get<bool>();

  const auto& s = j.at("seq2seq");
  cfg.seq2seq.enc_layers = s.at("enc_layers").get<int>();
  cfg.seq2seq.dec_layers = s.at("dec_layers").get<int>();
  cfg.seq2seq.hidden = s.at("hidden").get<Eigen::Index>();
  cfg.seq2seq.intermediate = s.at("intermediate").get<Eigen::Index>();
  cfg.seq2seq.heads = s.at("heads").get<Eigen::Index>();
  cfg.seq2seq.dropout = s.at("dropout").get<double>();
  cfg.seq2seq.num_buckets = s.at("num_buckets").get<Eigen::Index>();
  cfg.seq2seq.max_distance = s.at("max_distance").get<Eigen::Index>();
  cfg.seq2seq.max_src_len = s.at("max_src_len").get<int>();
  cfg.seq2seq.max_target_len = s.at("max_target_len").get<int>();
  cfg.seq2seq.beam_width = s.at("beam_width").get<int>();
  cfg.seq2seq.num_sentinels = s.at("num_sentinels").get<int>();

  const auto& sp = s.at("pretrain");
  cfg.seq2seq_pretrain.epochs = sp.at("epochs").get<int>();
  cfg.seq2seq_pretrain.batch_size = sp.at("batch_size").get<int>();
  cfg.seq2seq_pretrain.learning_rate = sp.at("learning_rate").get<double>();
  cfg.seq2seq_pretrain.schedule = sp.at("schedule").get<std::string>();
  cfg.seq2seq_pretrain.warmup_steps = sp.at("warmup_steps").get<long long>();
  cfg.seq2seq_pretrain.mask_rate = sp.at("mask_rate").get<double>();
  cfg.seq2seq_pretrain.mean_span = sp.at("mean_span").get<double>();
  cfg.seq2seq_pretrain.optimizer = opt_kind_from_string(sp.at("optimizer").get<std::string>());
  cfg.seq2seq_pretrain.weight_decay = sp.at("weight_decay").get<double>();

  const auto& sf = s.at("finetune");
  cfg.lemma_finetune.learning_rate = sf.at("learning_rate").get<double>();
  cfg.lemma_finetune.weight_decay = sf.at("weight_decay").get<double>();
  cfg.lemma_finetune.batch_size = sf.at("batch_size").get<int>();
  cfg.lemma_finetune.patience = sf.at("patience").get<int>();
  cfg.lemma_finetune.max_epochs = sf.at("max_epochs").get<int>();
  cfg.lemma_finetune.validation_beam_width = sf.at("validation_beam_width").get<int>();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& config_path,
                                        const std::vector<std::string>& overrides) {
  nlohmann::json merged = defaults();
  if (!config_path.empty()) {
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(read_file(config_path, "config file"));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("config " + config_path + " is not valid JSON: " + e.what());
    }
    merge_json(merged, file);
  }
  for (const auto& o : overrides) apply_override(merged, o);
  return from_json(merged);
}

const std::string& ExperimentConfig::split_path(const std::string& split) const {
  if (split == "train") return train_path;
  if (split == "valid") return valid_path;
  if (split == "test") return test_path;
  throw DataError("unknown split: " + split);
}

Treebank ExperimentConfig::load_split(const std::string& split) const {
  const std::string& path = split_path(split);
  if (path.empty()) throw DataError("config: data." + split + " path not set");
  // Constrained-subtask rule: one language only, enforced by file naming.
  const std::string name = fs::path(path).filename().string();
  if (name.rfind(language + "_", 0) != 0)
    throw DataError("data file " + name + " does not belong to language '" + language +
                    "' (expected " + language + "_<split>.conllu)");
  return load_conllu_file(path, language, split);
}

// ---------------------------------------------------------------------------
// run-directory bookkeeping
// ---------------------------------------------------------------------------

void prepare_run_dir(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.run_dir);
  fs::create_directories(fs::path(cfg.run_dir) / "checkpoints");
  const fs::path cfg_path = fs::path(cfg.run_dir) / "resolved_config.json";
  if (!fs::exists(cfg_path)) write_file(cfg_path.string(), cfg.resolved.dump(2) + "\n");
}

void record_artifact(const std::string& run_dir, const std::string& role,
                     const std::string& relative_path) {
  std::ofstream out(fs::path(run_dir) / "artifacts.tsv", std::ios::app);
  if (!out) throw DataError("cannot append to artifacts.tsv in " + run_dir);
  out << role << '\t' << relative_path << '\n';
}

std::string find_artifact(const std::string& run_dir, const std::string& role) {
  std::ifstream in(fs::path(run_dir) / "artifacts.tsv");
  if (!in) return "";
  std::string line, latest;
  while (std::getline(in, line)) {
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) continue;
    if (line.substr(0, tab) == role) latest = line.substr(tab + 1);
  }
  if (latest.empty()) return "";
  return (fs::path(run_dir) / latest).string();
}

std::string save_checkpoint_artifact(const std::string& run_dir, const Checkpoint& ckpt,
                                     const std::string& role) {
  const fs::path tmp = fs::path(run_dir) / "checkpoints" / ("tmp_" + role + ".ckpt");
  ckpt.save(tmp.string());
  const std::string hash = hash_hex(file_fnv1a(tmp.string()));
  const fs::path final_path = fs::path(run_dir) / "checkpoints" / (hash + ".ckpt");
  fs::rename(tmp, final_path);
  record_artifact(run_dir, role, "checkpoints/" + hash + ".ckpt");
  return final_path.string();
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_stats(const ExperimentConfig& cfg, const std::string& split) {
  const Treebank tb = cfg.load_split(split);
  const TreebankStats st = treebank_stats(tb);
  std::cout << "language\t" << cfg.language << "\nsplit\t" << split << "\ntokens\t" << st.tokens
            << "\nsentences\t" << st.sentences << "\n";
  return 0;
}

int cmd_build_vocab(const ExperimentConfig& cfg) {
  prepare_run_dir(cfg);
  const Treebank train = cfg.load_split("train");
  const CharVocab vocab = build_vocab(train);
  const fs::path path = fs::path(cfg.run_dir) / "vocab.txt";
  vocab.save(path.string());
  record_artifact(cfg.run_dir, "vocab", "vocab.txt");
  std::cout << "vocab_size\t" << vocab.size() << "\nvocab_file\t" << path.string() << "\n";
  return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
  prepare_run_dir(cfg);
  const CharVocab vocab = load_vocab_artifact(cfg);
  const Treebank train = cfg.load_split("train");
  if (train.sentences.empty()) throw DataError("pretrain: training split is empty");

  HlmConfig gen_cfg = cfg.generator;
  HlmConfig disc_cfg = cfg.discriminator;
  gen_cfg.vocab_size = vocab.size();
  disc_cfg.vocab_size = vocab.size();

  const auto windows =
      corpus_windows(train, vocab, disc_cfg.max_word_len, disc_cfg.max_seq_len);

  Rng rng = init_rng(cfg);
  Rng trng = train_rng(cfg);

  const fs::path log_path = fs::path(cfg.run_dir) / "pretrain_log.tsv";
  std::ofstream log(log_path, std::ios::app);
  auto log_line = [&](const std::string& line) { log << line << '\n'; };

  PretrainResult result;
  Checkpoint ckpt;
  if (cfg.pretrain.objective == "rtd") {
    HlmEncoder generator(gen_cfg, HlmEncoder::Head::LmSoftmax, rng);
    HlmEncoder discriminator(disc_cfg, HlmEncoder::Head::RtdSigmoid, rng,
                             generator.char_embedding_table());
    result = pretrain_rtd(generator, discriminator, windows, cfg.pretrain, trng, log_line,
                          cfg.pretrain_dropout);
    ckpt = export_discriminator(discriminator, cfg.language, trng, result.steps,
                                "hlm-discriminator");
  } else if (cfg.pretrain.objective == "mlm") {
    HlmEncoder model(disc_cfg, HlmEncoder::Head::LmSoftmax, rng);
    result = pretrain_mlm(model, windows, cfg.pretrain, trng, log_line, cfg.pretrain_dropout);
    ckpt = export_discriminator(model, cfg.language, trng, result.steps, "hlm-mlm");
  } else {
    throw DataError("unknown pretraining objective: " + cfg.pretrain.objective);
  }

  const std::string path = save_checkpoint_artifact(cfg.run_dir, ckpt, "pretrain_checkpoint");
  std::cout << "steps\t" << result.steps << "\naborted_on_nan\t" << result.aborted_on_nan
            << "\nlast_gen_loss\t" << result.last_gen_loss << "\nlast_disc_loss\t"
            << result.last_disc_loss << "\nlast_disc_accuracy\t" << result.last_disc_accuracy
            << "\ncheckpoint\t" << path << "\n";
  return result.aborted_on_nan ? 3 : 0;
}

int cmd_pretrain_seq2seq(const ExperimentConfig& cfg) {
  prepare_run_dir(cfg);
  const CharVocab base = load_vocab_artifact(cfg);
  const ExtVocab vocab(base, cfg.seq2seq.num_sentinels);
  const Treebank train = cfg.load_split("train");

  Seq2SeqConfig mcfg = cfg.seq2seq;
  mcfg.vocab_size = vocab.size();
  Rng rng = init_rng(cfg);
  Rng trng = train_rng(cfg);
  Seq2Seq model(mcfg, rng);

  std::vector<std::vector<Eigen::Index>> streams;
  for (const auto& s : train.sentences)
    streams.push_back(sentence_char_stream(s, vocab, mcfg.max_src_len));

  const fs::path log_path = fs::path(cfg.run_dir) / "seq2seq_pretrain_log.tsv";
  std::ofstream log(log_path, std::ios::app);
  auto log_line = [&](const std::string& line) { log << line << '\n'; };
  auto result = pretrain_seq2seq(model, streams, vocab, cfg.seq2seq_pretrain, trng, log_line);

  Checkpoint ckpt;
  ckpt.kind = "seq2seq-pretrain";
  ckpt.language = cfg.language;
  ckpt.step = result.steps;
  ckpt.rng_state = trng.state();
  ckpt.config = seq2seq_config_to_json(mcfg);
  checkpoint_from_store(ckpt, model.params());
  const std::string path =
      save_checkpoint_artifact(cfg.run_dir, ckpt, "seq2seq_pretrain_checkpoint");
  std::cout << "steps\t" << result.steps << "\nlast_loss\t" << result.last_loss
            << "\ncheckpoint\t" << path << "\n";
  return result.aborted_on_nan ? 3 : 0;
}

namespace {

int finetune_tagging_task(const ExperimentConfig& cfg, TagTask task,
                          const std::string& checkpoint_path) {
  const std::string role = task == TagTask::Pos ? "pos" : "morph";
  const CharVocab vocab = load_vocab_artifact(cfg);
  const std::string base_path =
      required_checkpoint(cfg, checkpoint_path, "pretrain_checkpoint");
  Checkpoint base = load_checkpoint_checked(cfg, base_path, {"hlm-discriminator", "hlm-mlm"});
  if (base.config.at("vocab_size").get<int>() != vocab.size())
    throw DataError("checkpoint vocabulary size does not match the run vocabulary");

  HlmConfig enc_cfg = hlm_config_from_json(base.config);
  Rng rng = init_rng(cfg);
  HlmEncoder encoder(enc_cfg, HlmEncoder::Head::None, rng);
  checkpoint_into_store(base, encoder.params());

  const Treebank train = cfg.load_split("train");
  const Treebank valid = cfg.load_split("valid");
  const FeatureSchema schema = build_feature_schema(train);
  const auto upos = upos_labels(train);
  TagHeadsT<double> heads(schema, upos, enc_cfg.hidden, cfg.finetune.head_hidden, task, rng);

  Rng trng = train_rng(cfg);
  FinetuneResult result = finetune_tagger(encoder, heads, train, valid, vocab, cfg.finetune, trng);

  Checkpoint out;
  out.kind = "hlm-tagger-" + role;
  out.language = cfg.language;
  out.step = result.epochs_run;
  out.rng_state = trng.state();
  out.config = hlm_config_to_json(enc_cfg);
  out.config["schema"] = schema_to_json(schema);
  out.config["upos_labels"] = upos;
  out.config["head_hidden"] = static_cast<long long>(cfg.finetune.head_hidden);
  checkpoint_from_store(out, encoder.params());
  checkpoint_from_store(out, heads.params());
  const std::string path =
      save_checkpoint_artifact(cfg.run_dir, out, "finetune_" + role + "_checkpoint");

  std::cout << "epochs\t" << result.epochs_run << "\nbest_epoch\t" << result.best_epoch
            << "\nbest_validation_score\t" << result.best_score << "\ncheckpoint\t" << path
            << "\n";
  return 0;
}

int finetune_lemma_task(const ExperimentConfig& cfg, const std::string& checkpoint_path) {
  const CharVocab base_vocab = load_vocab_artifact(cfg);
  const ExtVocab vocab(base_vocab, cfg.seq2seq.num_sentinels);
  Seq2SeqConfig mcfg = cfg.seq2seq;
  mcfg.vocab_size = vocab.size();

  Rng rng = init_rng(cfg);
  Seq2Seq model(mcfg, rng);

  // Starting from the denoising checkpoint when one exists; fresh otherwise.
  std::string base_path = checkpoint_path;
  if (base_path.empty()) base_path = find_artifact(cfg.run_dir, "seq2seq_pretrain_checkpoint");
  if (!base_path.empty()) {
    Checkpoint base = load_checkpoint_checked(cfg, base_path, {"seq2seq-pretrain"});
    if (base.config.at("vocab_size").get<int>() != vocab.size())
      throw DataError("seq2seq checkpoint vocabulary size does not match the run vocabulary");
    checkpoint_into_store(base, model.params());
  }

  const Treebank train = cfg.load_split("train");
  const Treebank valid = cfg.load_split("valid");
  const auto train_pairs = lemma_pairs(train, vocab, mcfg.max_target_len);
  const auto valid_pairs = lemma_pairs(valid, vocab, mcfg.max_target_len);

  Rng trng = train_rng(cfg);
  LemmaFinetuneResult result =
      finetune_lemma(model, vocab, train_pairs, valid_pairs, cfg.lemma_finetune, trng);

  Checkpoint out;
  out.kind = "seq2seq-lemma";
  out.language = cfg.language;
  out.step = result.epochs_run;
  out.rng_state = trng.state();
  out.config = seq2seq_config_to_json(mcfg);
  checkpoint_from_store(out, model.params());
  const std::string path =
      save_checkpoint_artifact(cfg.run_dir, out, "finetune_lemma_checkpoint");
  std::cout << "epochs\t" << result.epochs_run << "\nbest_epoch\t" << result.best_epoch
            << "\nbest_validation_score\t" << result.best_score << "\ncheckpoint\t" << path
            << "\n";
  return 0;
}

}  // namespace

int cmd_finetune(const ExperimentConfig& cfg, const std::string& task,
                 const std::string& checkpoint_path) {
  prepare_run_dir(cfg);
  if (task == "pos") return finetune_tagging_task(cfg, TagTask::Pos, checkpoint_path);
  if (task == "morph") return finetune_tagging_task(cfg, TagTask::Morph, checkpoint_path);
  if (task == "lemma") return finetune_lemma_task(cfg, checkpoint_path);
  throw DataError("unknown fine-tuning task: " + task);
}

namespace {

int predict_tagging_task(const ExperimentConfig& cfg, TagTask task, const std::string& split,
                         const std::string& checkpoint_path) {
  const std::string role = task == TagTask::Pos ? "pos" : "morph";
  const CharVocab vocab = load_vocab_artifact(cfg);
  const std::string path =
      required_checkpoint(cfg, checkpoint_path, "finetune_" + role + "_checkpoint");
  Checkpoint ckpt = load_checkpoint_checked(cfg, path, {"hlm-tagger-" + role});
  if (ckpt.config.at("vocab_size").get<int>() != vocab.size())
    throw DataError("checkpoint vocabulary size does not match the run vocabulary");

  HlmConfig enc_cfg = hlm_config_from_json(ckpt.config);
  FeatureSchema schema = schema_from_json(ckpt.config.at("schema"));
  const auto upos = ckpt.config.at("upos_labels").get<std::vector<std::string>>();
  const Eigen::Index head_hidden = ckpt.config.at("head_hidden").get<Eigen::Index>();

  Rng rng = init_rng(cfg);
  HlmEncoder encoder(enc_cfg, HlmEncoder::Head::None, rng);
  TagHeadsT<double> heads(schema, upos, enc_cfg.hidden, head_hidden, task, rng);
  checkpoint_into_store(ckpt, encoder.params());
  checkpoint_into_store(ckpt, heads.params());

  const Treebank input = cfg.load_split(split);
  const Treebank pred = predict_tags(encoder, heads, input, vocab);
  const std::string out_name = "pred_" + role + "_" + split + ".conllu";
  write_file((fs::path(cfg.run_dir) / out_name).string(), to_conllu(pred));
  record_artifact(cfg.run_dir, "pred_" + role + "_" + split, out_name);
  std::cout << "predictions\t" << (fs::path(cfg.run_dir) / out_name).string() << "\n";
  return 0;
}

int predict_lemma_task(const ExperimentConfig& cfg, const std::string& split,
                       const std::string& checkpoint_path, const std::string& upos_pred_path) {
  // Pipeline order: lemmatization consumes the PoS predictions.
  std::string upos_path = upos_pred_path;
  if (upos_path.empty()) upos_path = find_artifact(cfg.run_dir, "pred_pos_" + split);
  if (upos_path.empty())
    throw DataError("lemma prediction requires UPoS predictions for split '" + split +
                    "'; run `predict --task pos` first or pass --upos-pred");

  const CharVocab base_vocab = load_vocab_artifact(cfg);
  const ExtVocab vocab(base_vocab, cfg.seq2seq.num_sentinels);
  const std::string path =
      required_checkpoint(cfg, checkpoint_path, "finetune_lemma_checkpoint");
  Checkpoint ckpt = load_checkpoint_checked(cfg, path, {"seq2seq-lemma"});
  Seq2SeqConfig mcfg = seq2seq_config_from_json(ckpt.config);
  if (mcfg.vocab_size != vocab.size())
    throw DataError("checkpoint vocabulary size does not match the run vocabulary");

  Rng rng = init_rng(cfg);
  Seq2Seq model(mcfg, rng);
  checkpoint_into_store(ckpt, model.params());

  const Treebank input = cfg.load_split(split);
  const Treebank tagged = parse_conllu(read_file(upos_path, "UPoS prediction file"),
                                       cfg.language, split);
  if (tagged.sentences.size() != input.sentences.size())
    throw DataError("UPoS prediction file does not match the input split");

  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  for (std::size_t s = 0; s < input.sentences.size(); ++s) {
    const auto& sent = input.sentences[s];
    if (tagged.sentences[s].tokens.size() != sent.tokens.size())
      throw DataError("UPoS prediction file does not match the input split");
    for (std::size_t t = 0; t < sent.tokens.size(); ++t) {
      const std::string& upos = tagged.sentences[s].tokens[t].upos;
      const auto cands = lemmatize_token(model, vocab, sent.tokens[t].form, upos,
                                         mcfg.beam_width, mcfg.max_target_len, 3);
      out << sent.id << '\t' << sent.tokens[t].id << '\t' << sent.tokens[t].form << '\t' << upos;
      for (const auto& c : cands) out << '\t' << c.lemma << '\t' << c.log_prob;
      out << '\n';
    }
  }
  const std::string out_name = "pred_lemma_" + split + ".tsv";
  write_file((fs::path(cfg.run_dir) / out_name).string(), out.str());
  record_artifact(cfg.run_dir, "pred_lemma_" + split, out_name);
  std::cout << "predictions\t" << (fs::path(cfg.run_dir) / out_name).string() << "\n";
  return 0;
}

std::vector<std::vector<std::string>> parse_lemma_predictions(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      if (tab == std::string::npos) {
        cols.push_back(line.substr(start));
        break;
      }
      cols.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    if (cols.size() < 4) throw ParseError("lemma prediction line has fewer than 4 columns");
    std::vector<std::string> cands;
    for (std::size_t i = 4; i + 1 < cols.size() + 1 && cands.size() < 3; i += 2)
      if (i < cols.size()) cands.push_back(cols[i]);
    out.push_back(std::move(cands));
  }
  return out;
}

}  // namespace

int cmd_predict(const ExperimentConfig& cfg, const std::string& task, const std::string& split,
                const std::string& checkpoint_path, const std::string& upos_pred_path) {
  prepare_run_dir(cfg);
  if (task == "pos") return predict_tagging_task(cfg, TagTask::Pos, split, checkpoint_path);
  if (task == "morph") return predict_tagging_task(cfg, TagTask::Morph, split, checkpoint_path);
  if (task == "lemma") return predict_lemma_task(cfg, split, checkpoint_path, upos_pred_path);
  throw DataError("unknown prediction task: " + task);
}

int cmd_score(const ExperimentConfig& cfg, const std::string& task, const std::string& pred_path,
              const std::string& split) {
  prepare_run_dir(cfg);
  const Treebank gold = cfg.load_split(split);

  ScoreReport report;
  if (task == "pos" || task == "morph") {
    const Treebank pred = parse_conllu(read_file(pred_path, "prediction file"));
    std::vector<std::string> pred_tags, gold_tags;
    std::vector<Feats> pred_feats, gold_feats;
    if (pred.sentences.size() != gold.sentences.size())
      throw DataError("prediction/gold sentence counts differ");
    for (std::size_t s = 0; s < gold.sentences.size(); ++s) {
      if (pred.sentences[s].tokens.size() != gold.sentences[s].tokens.size())
        throw DataError("prediction/gold token counts differ in sentence " + std::to_string(s));
      for (std::size_t t = 0; t < gold.sentences[s].tokens.size(); ++t) {
        pred_tags.push_back(pred.sentences[s].tokens[t].upos);
        gold_tags.push_back(gold.sentences[s].tokens[t].upos);
        pred_feats.push_back(pred.sentences[s].tokens[t].feats);
        gold_feats.push_back(gold.sentences[s].tokens[t].feats);
      }
    }
    report = task == "pos" ? pos_score(pred_tags, gold_tags) : morph_score(pred_feats, gold_feats);
  } else if (task == "lemma") {
    const auto topk = parse_lemma_predictions(read_file(pred_path, "prediction file"));
    std::vector<std::string> gold_lemmas;
    for (const auto& s : gold.sentences)
      for (const auto& t : s.tokens) gold_lemmas.push_back(t.lemma);
    report = lemma_score(topk, gold_lemmas);
  } else {
    throw DataError("unknown scoring task: " + task);
  }

  std::ostringstream tsv;
  tsv << "# language\t" << cfg.language << "\n" << report.to_tsv();
  const std::string out_name = "score_" + task + "_" + split + ".tsv";
  write_file((fs::path(cfg.run_dir) / out_name).string(), tsv.str());
  record_artifact(cfg.run_dir, "score_" + task + "_" + split, out_name);
  std::cout << tsv.str();
  return 0;
}

}  // namespace hlm
