#include <catch2/catch.hpp>

#include <cstdlib>

#include "counterfax/pipeline.hpp"

using namespace counterfax;

namespace {

fs::path fresh_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("cfx_pipe_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

json tiny_config_json(const fs::path& out_dir) {
    return json{
        {"seed", 19},
        {"output_dir", out_dir.string()},
        {"dataset",
         {{"source", "synthetic-digits"},
          {"synthetic", {{"train3", 120}, {"train8", 120}, {"test3", 30}, {"test8", 30}}}}},
        {"classifier",
         {{"epochs", 2},
          {"batch_size", 32},
          {"learning_rate", 1e-3},
          {"augment", {{"enabled", false}}}}},
        {"explainer",
         {{"method", "CyCE"},
          {"images_per_domain", 64},
          {"schedule", {{"epochs", 1}, {"batch_size", 16}}}}},
        {"evaluation",
         {{"vae", {{"epochs", 2}, {"batch_size", 32}}}, {"images_per_domain", 24}}}};
}

RunConfig tiny_config(const fs::path& out_dir) { return config_from_json(tiny_config_json(out_dir)); }

}  // namespace

TEST_CASE("config parsing accepts overrides and rejects unknown keys", "[pipeline][config]") {
    fs::path dir = fresh_dir("cfg");
    json j = tiny_config_json(dir / "run");
    write_file_text(dir / "cfg.json", j.dump(2));

    SECTION("round trip with flag overrides, flags win") {
        ConfigOverrides ov;
        ov.seed = 99;
        ov.method = "SSyE";
        auto cfg = load_run_config(dir / "cfg.json", ov);
        CHECK(cfg.seed == 99);
        CHECK(cfg.explainer.method == "SSyE");
        CHECK(cfg.dataset.source == DatasetSource::synthetic_digits);
    }

    SECTION("environment variable overrides output_dir") {
        setenv("COUNTERFAX_OUTPUT_DIR", (dir / "env_run").c_str(), 1);
        auto cfg = load_run_config(dir / "cfg.json");
        CHECK(cfg.output_dir == dir / "env_run");
        unsetenv("COUNTERFAX_OUTPUT_DIR");
    }

    SECTION("unknown keys are config errors that name the key") {
        json bad = j;
        bad["explainer"]["typo_key"] = 1;
        write_file_text(dir / "bad.json", bad.dump());
        try {
            load_run_config(dir / "bad.json");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("typo_key") != std::string::npos);
        }
    }

    SECTION("invalid values are config errors") {
        json bad = j;
        bad["dataset"]["fractions"] = {0.5, 0.5, 0.1};
        write_file_text(dir / "bad2.json", bad.dump());
        CHECK_THROWS_AS(load_run_config(dir / "bad2.json"), ConfigError);

        json bad3 = j;
        bad3["explainer"]["method"] = "NotAMethod";
        write_file_text(dir / "bad3.json", bad3.dump());
        CHECK_THROWS_AS(load_run_config(dir / "bad3.json"), ConfigError);

        CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ConfigError);
    }
}

TEST_CASE("prepare-data is idempotent and records counts", "[pipeline][data]") {
    fs::path dir = fresh_dir("prep");
    RunConfig cfg = tiny_config(dir / "run");

    cmd_prepare_data(cfg, false);
    auto m1 = StageManifest::load(cfg.data_dir() / "manifest.json");
    REQUIRE(m1.has_value());
    CHECK(m1->metrics.at("train_count").get<int>() == 192);  // 240 * 0.8
    CHECK(m1->metrics.at("test_count").get<int>() == 60);

    auto t1 = fs::last_write_time(cfg.data_dir() / "train.cfx");
    cmd_prepare_data(cfg, false);  // second run: no-op
    CHECK(fs::last_write_time(cfg.data_dir() / "train.cfx") == t1);

    SECTION("changed config regenerates") {
        RunConfig cfg2 = cfg;
        cfg2.dataset.synth_train3 = 150;
        cmd_prepare_data(cfg2, false);
        auto m2 = StageManifest::load(cfg.data_dir() / "manifest.json");
        CHECK(m2->metrics.at("train_count").get<int>() != 192);
    }
}

TEST_CASE("tiny pipeline end to end with deterministic artifacts", "[pipeline][e2e]") {
    fs::path dir = fresh_dir("e2e");
    RunConfig cfg = tiny_config(dir / "run");

    cmd_prepare_data(cfg, false);
    cmd_train_classifier(cfg, false);
    auto cm = StageManifest::load(cfg.classifier_dir() / "manifest.json");
    REQUIRE(cm.has_value());
    CHECK(cm->metrics.contains("test_auc"));
    CHECK(cm->metrics.contains("test_accuracy"));

    cmd_train_explainer(cfg, "CyCE", false);
    REQUIRE(fs::exists(cfg.explainer_dir("CyCE") / "explainer.cfx"));
    REQUIRE(fs::exists(cfg.explainer_dir("CyCE") / "loss_log.csv"));
    {
        std::string log = read_file_text(cfg.explainer_dir("CyCE") / "loss_log.csv");
        CHECK(log.find("L_d_cy") != std::string::npos);
        CHECK(std::count(log.begin(), log.end(), '\n') == 2);  // header + one epoch
    }

    cmd_explain(cfg, "CyCE", std::nullopt, std::nullopt, 4, false);
    fs::path exdir = cfg.explainer_dir("CyCE") / "explanations";
    CHECK(fs::exists(exdir / "sheet.pgm"));
    int files = 0;
    for (const auto& e : fs::directory_iterator(exdir)) (void)e, ++files;
    CHECK(files == 4 * 3 + 4 + 1);  // per image: stable/adversary/map pgm + raw map, plus sheet

    SECTION("raw map container reloads bit-identically") {
        auto cls = load_run_classifier(cfg);
        auto expl = load_run_explainer(cfg, "CyCE", &cls);
        DatasetSplit split = load_split(cfg);
        // same 4-image batch the export command processed
        std::vector<Image> batch;
        for (int i = 0; i < 4; ++i) batch.push_back(split.test[size_t(i)].image);
        auto maps = explanation_map_batch(expl, batch);
        auto c = ArrayContainer::load(exdir / "test0_map.cfx");
        CHECK(c.get("map").to_vector<float>() == maps[0].values);
    }

    SECTION("evaluate writes the report schema") {
        cmd_evaluate(cfg, "CyCE", false);
        json r = json::parse(read_file_text(cfg.eval_dir() / "report_CyCE.json"));
        CHECK(r.at("method") == "CyCE");
        CHECK(r.at("dataset") == "synthetic-digits");
        CHECK(r.contains("classifier_hash"));
        CHECK(r.at("acc").contains("a"));
        CHECK_FALSE(r.at("acc").contains("s"));  // CyCE has no stable row
        for (const char* dir_key : {"0to1", "1to0"}) {
            CHECK(r.at("fd").at(dir_key).contains("adv"));
            CHECK_FALSE(r.at("fd").at(dir_key).contains("stable"));
            CHECK(r.at("js").at(dir_key).contains("adv"));
        }
        CHECK(fs::exists(cfg.eval_dir() / "scatter_CyCE.csv"));

        std::string table = cmd_report(cfg, {cfg.output_dir.string()}, false);
        CHECK(table.find("CyCE") != std::string::npos);
        CHECK(fs::exists(cfg.eval_dir() / "comparison.csv"));

        CHECK_THROWS_AS(cmd_report(cfg, {(dir / "nope").string()}), ConfigError);
    }

    SECTION("fixed-seed rerun reproduces identical artifact hashes") {
        RunConfig cfg2 = tiny_config(dir / "run2");
        cmd_prepare_data(cfg2, false);
        cmd_train_classifier(cfg2, false);
        cmd_train_explainer(cfg2, "CyCE", false);

        for (const char* stage : {"data", "classifier", "explainer"}) {
            fs::path m1, m2;
            if (std::string(stage) == "data") {
                m1 = cfg.data_dir() / "manifest.json";
                m2 = cfg2.data_dir() / "manifest.json";
            } else if (std::string(stage) == "classifier") {
                m1 = cfg.classifier_dir() / "manifest.json";
                m2 = cfg2.classifier_dir() / "manifest.json";
            } else {
                m1 = cfg.explainer_dir("CyCE") / "manifest.json";
                m2 = cfg2.explainer_dir("CyCE") / "manifest.json";
            }
            auto a = StageManifest::load(m1), b = StageManifest::load(m2);
            REQUIRE(a.has_value());
            REQUIRE(b.has_value());
            CHECK(a->artifact_hashes == b->artifact_hashes);
        }
    }
}

TEST_CASE("patch pipeline produces localization metrics", "[pipeline][patches]") {
    fs::path dir = fresh_dir("patches");
    RunConfig cfg = tiny_config(dir / "run");
    cfg.dataset.source = DatasetSource::patches;
    cfg.dataset.patch_n_per_class = 60;
    cfg.dataset.fractions = {0.7, 0.1, 0.2};
    cfg.classifier.epochs = 6;
    cfg.classifier.batch_size = 16;
    cfg.classifier.learning_rate = 2e-3;
    cfg.evaluation.vae.latent_dim = 8;
    cfg.evaluation.images_per_domain = 12;

    cmd_prepare_data(cfg, false);
    REQUIRE(fs::exists(cfg.data_dir() / "masked.cfx"));
    auto masked = load_masked(cfg.data_dir() / "masked.cfx");
    CHECK(masked.size() == 120);

    cmd_train_classifier(cfg, false);
    cmd_train_explainer(cfg, "CyCE", false);
    cmd_evaluate(cfg, "CyCE", false);

    json r = json::parse(read_file_text(cfg.eval_dir() / "report_CyCE.json"));
    REQUIRE(r.contains("loc"));
    CHECK(r.at("loc").contains("iou"));
    CHECK(r.at("loc").contains("ncc"));
    REQUIRE(r.contains("baselines"));
    CHECK(r.at("baselines").contains("gradient"));
    CHECK(r.at("baselines").contains("ig"));
}

#ifdef COUNTERFAX_CLI_PATH
TEST_CASE("cli exit codes", "[pipeline][cli]") {
    fs::path dir = fresh_dir("cli");
    std::string cli = COUNTERFAX_CLI_PATH;

    auto run = [&](const std::string& args) {
        std::string cmd = cli + " " + args + " > /dev/null 2>&1";
        int status = std::system(cmd.c_str());
        return WEXITSTATUS(status);
    };

    CHECK(run("prepare-data --config " + (dir / "missing.json").string()) == 2);

    write_file_text(dir / "bad.json", "{ not json");
    CHECK(run("prepare-data --config " + (dir / "bad.json").string()) == 2);

    json j = tiny_config_json(dir / "run");
    write_file_text(dir / "ok.json", j.dump());
    CHECK(run("train-classifier --config " + (dir / "ok.json").string()) == 2);  // no data yet
    CHECK(run("train-explainer --config " + (dir / "ok.json").string() + " --method Bogus") == 2);
    CHECK(run("prepare-data --config " + (dir / "ok.json").string()) == 0);
}
#endif
