// End-to-end checks of the command-line pipeline, driving the real binary.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

#ifndef HLM_CLI_PATH
#error "HLM_CLI_PATH must point at the hlm binary"
#endif

const char* kToyTrain =
    "# sent_id = s1\n"
    "1\tamat\tamo\tVERB\t_\tNumber=Sing|Person=3\t0\troot\t_\t_\n"
    "2\tpuella\tpuella\tNOUN\t_\tCase=Nom|Number=Sing\t1\tnsubj\t_\t_\n"
    "3\tviam\tvia\tNOUN\t_\tCase=Acc|Number=Sing\t1\tobj\t_\t_\n"
    "\n"
    "# sent_id = s2\n"
    "1\tamant\tamo\tVERB\t_\tNumber=Plur|Person=3\t0\troot\t_\t_\n"
    "2\tpuellae\tpuella\tNOUN\t_\tCase=Nom|Number=Plur\t1\tnsubj\t_\t_\n"
    "\n"
    "# sent_id = s3\n"
    "1\tvia\tvia\tNOUN\t_\tCase=Nom|Number=Sing\t0\troot\t_\t_\n"
    "2\tlonga\tlongus\tADJ\t_\tCase=Nom|Number=Sing\t1\tamod\t_\t_\n"
    "\n"
    "# sent_id = s4\n"
    "1\tpuellam\tpuella\tNOUN\t_\tCase=Acc|Number=Sing\t0\troot\t_\t_\n"
    "2\tamo\tamo\tVERB\t_\tNumber=Sing|Person=1\t1\tobj\t_\t_\n"
    "\n"
    "# sent_id = s5\n"
    "1\tvias\tvia\tNOUN\t_\tCase=Acc|Number=Plur\t0\troot\t_\t_\n"
    "2\tlongas\tlongus\tADJ\t_\tCase=Acc|Number=Plur\t1\tamod\t_\t_\n"
    "\n";

struct CliFixture {
  fs::path dir;

  CliFixture() {
    dir = fs::temp_directory_path() / "hlm_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write("toy_train.conllu", kToyTrain);
    write("toy_valid.conllu", kToyTrain);
    write("toy_test.conllu", kToyTrain);
    write("config.json", config_json("run", 7));
  }

  ~CliFixture() { fs::remove_all(dir); }

  static std::string config_json(const std::string& run_dir, int seed) {
    std::ostringstream os;
    os << R"({
  "language": "toy",
  "seed": )" << seed
       << R"(,
  "run_dir": ")" << run_dir
       << R"(",
  "data": {"train": "toy_train.conllu", "valid": "toy_valid.conllu", "test": "toy_test.conllu"},
  "model": {"hidden": 32, "heads": 4, "intra_intermediate": 48, "inter_intermediate": 48,
            "generator": {"intra_layers": 1, "inter_layers": 1},
            "discriminator": {"intra_layers": 1, "inter_layers": 2},
            "max_rel_dist_intra": 16, "max_rel_dist_inter": 32, "dropout": 0.0},
  "pretrain": {"epochs": 3, "batch_size": 4, "learning_rate": 1e-3, "use_dropout": false},
  "finetune": {"learning_rate": 3e-3, "batch_size": 4, "max_epochs": 6, "patience": 10},
  "seq2seq": {"enc_layers": 1, "dec_layers": 1, "hidden": 32, "intermediate": 48, "heads": 4,
              "num_buckets": 8, "max_distance": 16, "beam_width": 6, "max_target_len": 12,
              "pretrain": {"epochs": 3, "batch_size": 4, "learning_rate": 0.02, "warmup_steps": 2},
              "finetune": {"learning_rate": 5e-3, "batch_size": 8, "max_epochs": 5,
                           "patience": 10, "validation_beam_width": 2}}
})";
    return os.str();
  }

  void write(const std::string& name, const std::string& content) const {
    std::ofstream out(dir / name, std::ios::binary);
    out << content;
  }

  int run(const std::string& args) const {
    const std::string cmd = "cd '" + dir.string() + "' && '" + HLM_CLI_PATH + "' " + args +
                            " >> cli_log.txt 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
  }

  bool exists(const std::string& rel) const { return fs::exists(dir / rel); }

  std::string slurp(const std::string& rel) const {
    std::ifstream in(dir / rel, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  }
};

}  // namespace

TEST_CASE("cli: full tiny-corpus pipeline emits all three score reports") {
  CliFixture fx;
  CHECK(fx.run("stats -c config.json --split train") == 0);
  CHECK(fx.run("build-vocab -c config.json") == 0);
  CHECK(fx.run("pretrain -c config.json") == 0);
  CHECK(fx.run("finetune -c config.json --task pos") == 0);
  CHECK(fx.run("finetune -c config.json --task morph") == 0);
  CHECK(fx.run("pretrain-seq2seq -c config.json") == 0);
  CHECK(fx.run("finetune -c config.json --task lemma") == 0);
  CHECK(fx.run("predict -c config.json --task pos --split test") == 0);
  CHECK(fx.run("predict -c config.json --task morph --split test") == 0);
  CHECK(fx.run("predict -c config.json --task lemma --split test") == 0);
  CHECK(fx.run("score -c config.json --task pos --pred run/pred_pos_test.conllu --split test") == 0);
  CHECK(fx.run("score -c config.json --task morph --pred run/pred_morph_test.conllu --split test") == 0);
  CHECK(fx.run("score -c config.json --task lemma --pred run/pred_lemma_test.tsv --split test") == 0);

  CHECK(fx.exists("run/vocab.txt"));
  CHECK(fx.exists("run/resolved_config.json"));
  CHECK(fx.exists("run/pretrain_log.tsv"));
  for (const char* name : {"score_pos_test.tsv", "score_morph_test.tsv", "score_lemma_test.tsv"}) {
    CHECK(fx.exists(std::string("run/") + name));
    const std::string text = fx.slurp(std::string("run/") + name);
    CHECK(text.find("score") != std::string::npos);
  }

  // The training log is step \t lr \t gen_loss \t disc_loss \t disc_accuracy.
  std::istringstream log(fx.slurp("run/pretrain_log.tsv"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    int tabs = 0;
    for (char c : line) tabs += c == '\t';
    CHECK(tabs == 4);
    ++lines;
  }
  CHECK(lines == 6);  // 3 epochs x 2 steps
}

TEST_CASE("cli: identical seed and config reproduce byte-identical artifacts") {
  CliFixture fx;
  fx.write("config_a.json", CliFixture::config_json("run_a", 11));
  fx.write("config_b.json", CliFixture::config_json("run_b", 11));
  CHECK(fx.run("build-vocab -c config_a.json") == 0);
  CHECK(fx.run("build-vocab -c config_b.json") == 0);
  CHECK(fx.slurp("run_a/vocab.txt") == fx.slurp("run_b/vocab.txt"));

  CHECK(fx.run("pretrain -c config_a.json") == 0);
  CHECK(fx.run("pretrain -c config_b.json") == 0);
  // checkpoints are content-addressed, so equal training gives equal names
  std::string a, b;
  for (const auto& e : fs::directory_iterator(fx.dir / "run_a" / "checkpoints"))
    a = e.path().filename().string();
  for (const auto& e : fs::directory_iterator(fx.dir / "run_b" / "checkpoints"))
    b = e.path().filename().string();
  CHECK(a == b);
  CHECK(!a.empty());
}

TEST_CASE("cli: missing inputs exit with code 2 and a named path") {
  CliFixture fx;
  fx.write("config_missing.json",
           "{\"language\": \"toy\", \"run_dir\": \"runx\", "
           "\"data\": {\"train\": \"toy_absent.conllu\", \"valid\": \"\", \"test\": \"\"}}");
  CHECK(fx.run("stats -c config_missing.json --split train") == 2);
  CHECK(fx.slurp("cli_log.txt").find("toy_absent.conllu") != std::string::npos);
}

TEST_CASE("cli: data files must belong to the configured language") {
  CliFixture fx;
  fx.write("other_train.conllu", kToyTrain);
  fx.write("config_other.json",
           "{\"language\": \"toy\", \"run_dir\": \"runy\", "
           "\"data\": {\"train\": \"other_train.conllu\", \"valid\": \"\", \"test\": \"\"}}");
  CHECK(fx.run("stats -c config_other.json --split train") == 2);
}

TEST_CASE("cli: lemma prediction refuses to run before PoS prediction") {
  CliFixture fx;
  CHECK(fx.run("build-vocab -c config.json") == 0);
  CHECK(fx.run("finetune -c config.json --task lemma") == 0);
  CHECK(fx.run("predict -c config.json --task lemma --split test") == 2);
  CHECK(fx.slurp("cli_log.txt").find("UPoS predictions") != std::string::npos);
}

TEST_CASE("cli: checkpoints refuse a different language's data") {
  CliFixture fx;
  CHECK(fx.run("build-vocab -c config.json") == 0);
  CHECK(fx.run("pretrain -c config.json") == 0);
  // Same files renamed to a different language; the checkpoint must refuse.
  fx.write("alt_train.conllu", kToyTrain);
  fx.write("alt_valid.conllu", kToyTrain);
  fx.write("alt_test.conllu", kToyTrain);
  std::string cfg = CliFixture::config_json("run", 7);
  std::string from = "\"language\": \"toy\"";
  cfg.replace(cfg.find(from), from.size(), "\"language\": \"alt\"");
  std::string data_from = "toy_train.conllu";
  cfg.replace(cfg.find(data_from), data_from.size(), "alt_train.conllu");
  data_from = "toy_valid.conllu";
  cfg.replace(cfg.find(data_from), data_from.size(), "alt_valid.conllu");
  data_from = "toy_test.conllu";
  cfg.replace(cfg.find(data_from), data_from.size(), "alt_test.conllu");
  fx.write("config_alt.json", cfg);
  CHECK(fx.run("finetune -c config_alt.json --task pos") == 2);
}

TEST_CASE("cli: usage errors exit with code 1") {
  CliFixture fx;
  CHECK(fx.run("no-such-command") == 1);
  CHECK(fx.run("finetune -c config.json") == 1);  // --task is required
}

TEST_CASE("cli: --set overrides config values") {
  CliFixture fx;
  CHECK(fx.run("build-vocab -c config.json --set run_dir=run_override") == 0);
  CHECK(fx.exists("run_override/vocab.txt"));
}
