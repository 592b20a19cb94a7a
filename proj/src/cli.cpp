#include "pforge/cli.hpp"

#include <algorithm>
#include <csignal>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pforge/appserver.hpp"
#include "pforge/composite.hpp"
#include "pforge/config.hpp"
#include "pforge/cropkit.hpp"
#include "pforge/datasetkit.hpp"
#include "pforge/genflow.hpp"
#include "pforge/identity.hpp"
#include "pforge/imageio.hpp"
#include "pforge/imgcore.hpp"
#include "pforge/report_io.hpp"

namespace fs = std::filesystem;

namespace pforge {

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string manifest;
  bool json = false;
};

struct Context {
  Common common;
  AppConfig config;
  std::ostream& out;
  bool seed_given = false;

  std::shared_ptr<FaceBackend> backend() const { return make_backend(config.face_backend); }
};

void emit(Context& ctx, const ojson& j, const std::string& text) {
  if (ctx.common.json)
    ctx.out << j.dump(2) << '\n';
  else
    ctx.out << text;
}

fs::path require_manifest(const Context& ctx) {
  if (ctx.common.manifest.empty()) fail(ErrorKind::invalid_argument, "--manifest is required");
  return ctx.common.manifest;
}

Landmarks load_landmarks(const std::string& file_or_json) {
  const std::string text = fs::exists(file_or_json) ? read_text(file_or_json) : file_or_json;
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed landmarks: ") + e.what());
  }
  if (j.is_object()) j = j.at("landmarks");
  return landmarks_from_json(j);
}

// A ranking report, a JSON array of numbers, or one number per line.
std::vector<double> load_distances(const fs::path& file) {
  const std::string text = read_text(file);
  std::vector<double> out;
  try {
    const auto j = ojson::parse(text);
    if (j.is_array()) return j.get<std::vector<double>>();
    for (const auto& item : report_from_json(j).items) out.push_back(item.distance);
    return out;
  } catch (const nlohmann::json::exception&) {
  }
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    try {
      out.push_back(std::stod(line));
    } catch (const std::exception&) {
      fail(ErrorKind::invalid_argument, "not a distance: " + line);
    }
  }
  return out;
}

RankingReport load_report(const fs::path& file) {
  try {
    return report_from_json(ojson::parse(read_text(file)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("malformed report: ") + e.what());
  }
}

std::pair<std::string, std::string> split_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) fail(ErrorKind::invalid_argument, "expected name=value, got " + s);
  return {s.substr(0, eq), s.substr(eq + 1)};
}

KeypointImageSpec canvas_spec(int w, int h) {
  KeypointImageSpec spec;
  spec.width = w;
  spec.height = h;
  return spec;
}

// Images named on the command line, or every entry of the manifest.
std::vector<NamedImage> load_named_images(const Context& ctx, const std::vector<std::string>& inputs) {
  std::vector<NamedImage> images;
  for (const auto& f : inputs) images.push_back({fs::path(f).filename().string(), read_image(f)});
  if (images.empty() && !ctx.common.manifest.empty()) {
    const fs::path mpath = ctx.common.manifest;
    const auto manifest = DatasetManifest::load(mpath);
    for (const auto& e : manifest.entries) images.push_back({e.id, read_image(mpath.parent_path() / e.path)});
  }
  if (images.empty()) fail(ErrorKind::invalid_argument, "no input images (use --input or --manifest)");
  return images;
}

std::vector<SynthReference> synth_references(const Context& ctx, FaceBackend& backend) {
  const fs::path mpath = require_manifest(ctx);
  const auto manifest = DatasetManifest::load(mpath);
  std::vector<SynthReference> refs;
  for (const auto& e : manifest.entries) {
    if (e.source != Source::real) continue;
    SynthReference r;
    r.id = e.id;
    r.image = read_image(mpath.parent_path() / e.path);
    const auto faces = detect_faces(backend, r.image);
    if (faces.empty()) continue;
    r.face = faces.front();
    refs.push_back(std::move(r));
  }
  if (refs.empty()) fail(ErrorKind::invalid_argument, "no reference with a detectable face in the manifest");
  return refs;
}

std::string describe_report(const RankingReport& r) {
  std::ostringstream s;
  s << to_csv(r);
  return s.str();
}

AppServer* active_server = nullptr;

extern "C" void stop_server(int) {
  if (active_server != nullptr) active_server->stop();
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Portrait dataset preparation, identity ranking and generation tooling.", "portrait-forge"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config, "Configuration file (default: $PORTRAIT_FORGE_CONFIG)");
  auto* seed_opt = app.add_option("--seed", common.seed, "Master seed");
  app.add_option("--manifest", common.manifest, "Dataset manifest");
  app.add_flag("--json", common.json, "Machine-readable output");

  std::function<void(Context&)> action;
  auto command = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    return sub;
  };

  // augment
  std::string plan_file, out_dir;
  {
    auto* sub = command("augment", "Apply a seeded augmentation plan to a manifest");
    sub->add_option("--plan", plan_file, "Augmentation plan JSON")->required();
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->callback([&] {
      action = [&](Context& ctx) {
        const fs::path mpath = require_manifest(ctx);
        AugPlan plan = AugPlan::load(plan_file);
        if (ctx.seed_given) plan.master_seed = ctx.common.seed;
        const auto result = apply_plan(DatasetManifest::load(mpath), mpath.parent_path(), plan, out_dir);
        ojson j;
        j["manifest"] = (fs::path(out_dir) / "manifest.json").string();
        j["entries"] = result.manifest.entries.size();
        ojson failures = ojson::array();
        for (const auto& f : result.failures) failures.push_back({{"id", f.id}, {"error", f.error}});
        j["failures"] = failures;
        emit(ctx, j, "augmented " + std::to_string(result.manifest.entries.size()) + " entries into " + out_dir + "\n");
        if (!result.failures.empty()) fail(ErrorKind::invalid_argument, std::to_string(result.failures.size()) + " entries failed");
      };
    });
  }

  // crop
  std::string input, output, mode = "center", bucket_text;
  double target_mp = 1.0;
  {
    auto* sub = command("crop", "Crop an image to its nearest aspect bucket");
    sub->add_option("--input", input)->required();
    sub->add_option("--output", output)->required();
    sub->add_option("--mode", mode, "center or face")->check(CLI::IsMember({"center", "face"}));
    sub->add_option("--mp", target_mp, "Target megapixels for center mode");
    sub->add_option("--bucket", bucket_text, "Force a WxH bucket in face mode");
    sub->callback([&] {
      action = [&](Context& ctx) {
        const ImageBuffer img = read_image(input);
        const BucketSet buckets = ctx.config.buckets();
        ojson j;
        ImageBuffer result;
        if (mode == "center") {
          auto r = center_crop_megapixel(img, target_mp, buckets);
          j["bucket"] = to_string(r.bucket);
          j["window"] = {r.window.left, r.window.top, r.window.width, r.window.height};
          result = std::move(r.image);
        } else {
          const auto faces = detect_faces(*ctx.backend(), img);
          if (faces.empty()) fail(ErrorKind::invalid_argument, "no face detected in " + input);
          const Bucket b = bucket_text.empty() ? nearest_bucket(img.width(), img.height(), buckets) : parse_bucket(bucket_text);
          auto r = face_anchored_crop(img, faces.front(), b);
          j["bucket"] = to_string(b);
          j["window"] = {r.window.left, r.window.top, r.window.width, r.window.height};
          j["clamped"] = {r.clamped_x, r.clamped_y};
          j["face_offset"] = {r.face_offset_x, r.face_offset_y};
          result = std::move(r.image);
        }
        write_image(output, result);
        j["output"] = output;
        j["width"] = result.width();
        j["height"] = result.height();
        emit(ctx, j, output + " " + std::to_string(result.width()) + "x" + std::to_string(result.height()) + "\n");
      };
    });
  }

  // composite
  std::string mask_file, background_file, palette_name, dst_file;
  std::string composite_mode = "background";
  int feather = 0, offset_x = 0, offset_y = 0;
  bool mixed = false;
  {
    auto* sub = command("composite", "Replace a background or clone seamlessly into a destination");
    sub->add_option("--input", input)->required();
    sub->add_option("--mask", mask_file)->required();
    sub->add_option("--output", output)->required();
    sub->add_option("--mode", composite_mode, "background or poisson")->check(CLI::IsMember({"background", "poisson"}));
    sub->add_option("--background", background_file, "Background image");
    sub->add_option("--palette", palette_name, "Palette name or #rrggbb");
    sub->add_option("--feather", feather, "Mask feather radius");
    sub->add_option("--dst", dst_file, "Destination image for poisson mode");
    sub->add_option("--offset-x", offset_x);
    sub->add_option("--offset-y", offset_y);
    sub->add_flag("--mixed", mixed, "Mixed gradients");
    sub->callback([&] {
      action = [&](Context& ctx) {
        const ImageBuffer img = read_image(input);
        const Mask mask = read_mask(mask_file);
        ImageBuffer result;
        ojson j;
        if (composite_mode == "background") {
          if (background_file.empty() == palette_name.empty())
            fail(ErrorKind::invalid_argument, "give exactly one of --background and --palette");
          const Background bg = background_file.empty() ? Background{Palette::by_name(palette_name)}
                                                        : Background{read_image(background_file)};
          result = replace_background(img, feather_mask(mask, feather), bg, ctx.common.seed);
        } else {
          if (dst_file.empty()) fail(ErrorKind::invalid_argument, "--dst is required in poisson mode");
          PoissonOptions opts;
          opts.mixed_gradients = mixed;
          const auto sol = poisson_solve<double>(img, read_image(dst_file), mask, {offset_x, offset_y}, opts);
          result = poisson_blend(img, read_image(dst_file), mask, {offset_x, offset_y}, opts);
          j["relative_residual"] = sol.relative_residual;
          j["iterations"] = sol.iterations;
          j["unknowns"] = sol.unknowns;
        }
        write_image(output, result);
        j["output"] = output;
        emit(ctx, j, output + "\n");
      };
    });
  }

  // build-dataset
  std::string raw_dir, subject;
  double min_confidence = 0.95;
  {
    auto* sub = command("build-dataset", "Filter, crop and catalogue raw portraits");
    sub->add_option("--raw", raw_dir, "Directory of raw images")->required();
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->add_option("--subject", subject, "Subject id");
    sub->add_option("--min-confidence", min_confidence);
    sub->callback([&] {
      action = [&](Context& ctx) {
        BuildConfig cfg;
        cfg.subject_id = subject;
        cfg.min_confidence = min_confidence;
        const auto result = build_dataset(raw_dir, out_dir, ctx.config.buckets(), cfg, *ctx.backend());
        ojson j;
        j["manifest"] = (fs::path(out_dir) / "manifest.json").string();
        j["kept"] = result.manifest.entries.size();
        ojson rejected = ojson::array();
        for (const auto& r : result.rejected) rejected.push_back({{"file", r.file}, {"reason", r.reason}});
        j["rejected"] = rejected;
        j["reasons"] = result.reasons;
        emit(ctx, j,
             "kept " + std::to_string(result.manifest.entries.size()) + ", rejected " +
                 std::to_string(result.rejected.size()) + "\n");
      };
    });
  }

  // validate-mix
  double max_share = 0.25;
  std::optional<double> min_real;
  {
    auto* sub = command("validate-mix", "Check concept shares and the real/synthetic balance");
    sub->add_option("--max-share", max_share);
    sub->add_option("--min-real", min_real);
    sub->callback([&] {
      action = [&](Context& ctx) {
        MixPolicy policy{max_share, min_real};
        const auto report = validate_mix(DatasetManifest::load(require_manifest(ctx)), policy);
        std::string text;
        for (const auto& v : report.violations) text += "violation: " + v + "\n";
        for (const auto& w : report.warnings) text += "warning: " + w + "\n";
        if (report.ok()) text += "ok\n";
        emit(ctx, to_json(report), text);
        if (!report.ok()) throw Error(ErrorKind::invalid_argument, "mix policy violated");
      };
    });
  }

  // embed
  std::vector<std::string> inputs;
  std::string profile_out;
  {
    auto* sub = command("embed", "Detect and embed faces");
    sub->add_option("--input", inputs, "Images (default: manifest entries)");
    sub->add_option("--profile-out", profile_out, "Write the reference profile built from the embeddings");
    sub->add_option("--subject", subject, "Subject id for the profile");
    sub->callback([&] {
      action = [&](Context& ctx) {
        auto backend = ctx.backend();
        ojson items = ojson::array();
        std::vector<Embedding> embeddings;
        std::string text;
        for (const auto& [id, img] : load_named_images(ctx, inputs)) {
          ojson o;
          o["id"] = id;
          const auto faces = detect_faces(*backend, img);
          ojson fj = ojson::array();
          for (auto f : faces) {
            f.embedding = embed_face(*backend, img, f);
            f.yaw_deg = estimate_yaw(f);
            ojson face = to_json(f);
            face["embedding"] = embedding_to_json(*f.embedding);
            fj.push_back(std::move(face));
          }
          if (!faces.empty()) embeddings.push_back(embedding_from_json(fj[0]["embedding"]));
          text += id + ": " + std::to_string(faces.size()) + " face(s)\n";
          o["faces"] = std::move(fj);
          items.push_back(std::move(o));
        }
        ojson j;
        j["images"] = std::move(items);
        if (!profile_out.empty()) {
          const auto profile = build_profile(embeddings, subject);
          write_text(profile_out, to_json(profile).dump(2) + "\n");
          j["profile"] = profile_out;
          text += "profile: " + profile_out + "\n";
        }
        emit(ctx, j, text);
      };
    });
  }

  // rank
  std::string profile_file;
  {
    auto* sub = command("rank", "Rank images by face distance to a reference profile");
    sub->add_option("--profile", profile_file, "Reference profile JSON")->required();
    sub->add_option("--input", inputs, "Images (default: manifest entries)");
    sub->callback([&] {
      action = [&](Context& ctx) {
        const auto profile = profile_from_json(ojson::parse(read_text(profile_file)));
        auto backend = ctx.backend();
        std::vector<Candidate> candidates;
        ojson unranked = ojson::array();
        for (const auto& [id, img] : load_named_images(ctx, inputs)) {
          const auto faces = detect_faces(*backend, img);
          if (faces.empty()) {
            unranked.push_back({{"id", id}, {"reason", "no face"}});
            continue;
          }
          candidates.push_back({id, embed_face(*backend, img, faces.front())});
        }
        if (candidates.empty()) fail(ErrorKind::invalid_argument, "no image had a detectable face");
        const auto report = rank_images(candidates, profile);
        ojson j = to_json(report);
        j["unranked"] = unranked;
        emit(ctx, j, describe_report(report));
      };
    });
  }

  // filter
  std::string report_file;
  std::optional<double> k_percent, quantile;
  std::optional<int> min_n;
  {
    auto* sub = command("filter", "Discard distant items from a ranking report");
    sub->add_option("--report", report_file, "Ranking report JSON")->required();
    auto* k = sub->add_option("--k", k_percent, "Discard the k percent most distant");
    sub->add_option("--q", quantile, "Discard items above this quantile")->excludes(k);
    sub->add_option("--min-n", min_n, "Minimum size for the top-k rule");
    sub->callback([&] {
      action = [&](Context& ctx) {
        FilterPolicy policy = ctx.config.filter;
        if (k_percent) {
          policy.mode = FilterPolicy::Mode::top_k_percent;
          policy.k_percent = *k_percent;
        }
        if (quantile) {
          policy.mode = FilterPolicy::Mode::quantile;
          policy.q = *quantile;
        }
        if (min_n) policy.min_n = *min_n;
        std::vector<std::pair<std::string, double>> d;
        for (const auto& item : load_report(report_file).items) d.emplace_back(item.id, item.distance);
        if (d.empty()) fail(ErrorKind::invalid_argument, "report has no items");
        const auto filtered = apply_filter(rank_distances(std::move(d)), policy);
        emit(ctx, to_json(filtered), describe_report(filtered));
      };
    });
  }

  // summarize
  std::string distances_file;
  {
    auto* sub = command("summarize", "Distance distribution summary with KDE mode");
    sub->add_option("--distances", distances_file, "Report JSON, JSON array, or one value per line")->required();
    sub->callback([&] {
      action = [&](Context& ctx) {
        const auto values = load_distances(distances_file);
        if (values.empty()) fail(ErrorKind::invalid_argument, "no distances");
        const auto s = summarize_distribution(values);
        std::ostringstream text;
        text << "n=" << s.count << " mean=" << s.mean << " median=" << s.median << " min=" << s.min
             << " max=" << s.max << " mode=" << s.kde_mode << " h=" << s.bandwidth << '\n';
        emit(ctx, to_json(s), text.str());
      };
    });
  }

  // compare-checkpoints
  std::vector<std::string> set_args, failure_args;
  {
    auto* sub = command("compare-checkpoints", "Order checkpoints by their face-distance distributions");
    sub->add_option("--set", set_args, "name=distances-file")->required();
    sub->add_option("--failure-rate", failure_args, "name=detection failure rate");
    sub->callback([&] {
      action = [&](Context& ctx) {
        std::map<std::string, std::vector<double>> sets;
        std::map<std::string, double> rates;
        for (const auto& s : set_args) {
          auto [name, file] = split_assignment(s);
          sets[name] = load_distances(file);
        }
        for (const auto& s : failure_args) {
          auto [name, value] = split_assignment(s);
          rates[name] = std::stod(value);
        }
        const auto cmp = compare_checkpoints(sets, rates);
        std::string text;
        for (const auto& e : cmp) {
          text += (e.diverged ? std::string("diverged") : std::to_string(e.position)) + " " + e.name;
          if (e.indistinguishable) text += " (indistinguishable)";
          text += "\n";
        }
        emit(ctx, to_json(cmp), text);
      };
    });
  }

  // perturb
  std::string landmarks_arg;
  double rho = 0.05;
  {
    auto* sub = command("perturb", "Jitter five landmarks within rho times the interocular distance");
    sub->add_option("--landmarks", landmarks_arg, "Landmarks JSON file or literal")->required();
    sub->add_option("--rho", rho);
    sub->callback([&] {
      action = [&](Context& ctx) {
        const auto lm = perturb_landmarks(load_landmarks(landmarks_arg), {rho, ctx.common.seed});
        ojson j;
        j["landmarks"] = to_json(lm);
        emit(ctx, j, j["landmarks"].dump() + "\n");
      };
    });
  }

  // render-keypoints
  int width = 1024, height = 1024;
  {
    auto* sub = command("render-keypoints", "Draw the five-point conditioning image");
    sub->add_option("--landmarks", landmarks_arg, "Landmarks JSON file or literal")->required();
    sub->add_option("--output", output)->required();
    sub->add_option("--width", width);
    sub->add_option("--height", height);
    sub->callback([&] {
      action = [&](Context& ctx) {
        const auto img = render_keypoints(load_landmarks(landmarks_arg), canvas_spec(width, height));
        write_image(output, img);
        ojson j;
        j["output"] = output;
        j["sha256"] = content_hash(img);
        emit(ctx, j, output + "\n");
      };
    });
  }

  // two-step
  std::string foreign_file, prompt = PromptPool::default_prompt;
  int reference_count = default_reference_count;
  {
    auto* sub = command("two-step", "Generate with foreign keypoints, then with the keypoints of that output");
    sub->add_option("--reference", inputs, "Reference images (default: manifest entries)");
    sub->add_option("--foreign", foreign_file, "Image supplying the initial keypoints")->required();
    sub->add_option("--prompt", prompt);
    sub->add_option("--out", out_dir)->required();
    sub->add_option("--width", width);
    sub->add_option("--height", height);
    sub->add_option("--reference-count", reference_count);
    sub->callback([&] {
      action = [&](Context& ctx) {
        auto backend = ctx.backend();
        auto generator = make_generator(ctx.config.generator);
        const auto plan = make_two_step_plan(load_named_images(ctx, inputs), read_image(foreign_file), *backend,
                                             canvas_spec(width, height), prompt, ctx.common.seed, reference_count);
        const auto result = run_two_step(plan, *backend, *generator, fs::path(out_dir));
        ojson j;
        j["step1"] = (fs::path(out_dir) / "step1.png").string();
        j["final"] = (fs::path(out_dir) / "final.png").string();
        j["records"] = {to_json(result.records[0]), to_json(result.records[1])};
        emit(ctx, j, j["final"].get<std::string>() + "\n");
      };
    });
  }

  // synth-augment
  std::string prompts_file, rare_token = "sks", class_noun = "person";
  int count = 8;
  bool merge = false;
  {
    auto* sub = command("synth-augment", "Generate identity-conditioned synthetic entries");
    sub->add_option("--prompts", prompts_file, "Prompt file (one per line)");
    sub->add_option("--count", count);
    sub->add_option("--out", out_dir)->required();
    sub->add_option("--rare-token", rare_token);
    sub->add_option("--class-noun", class_noun);
    sub->add_option("--rho", rho);
    sub->add_option("--width", width);
    sub->add_option("--height", height);
    sub->add_option("--reference-count", reference_count);
    sub->add_flag("--merge", merge, "Include the input entries in the output manifest");
    sub->callback([&] {
      action = [&](Context& ctx) {
        auto backend = ctx.backend();
        auto generator = make_generator(ctx.config.generator);
        const fs::path mpath = require_manifest(ctx);
        const auto source = DatasetManifest::load(mpath);
        const auto refs = synth_references(ctx, *backend);
        const PromptPool pool = prompts_file.empty() ? parse_prompts("") : ingest_prompts(prompts_file);
        SynthConfig cfg;
        cfg.count = count;
        cfg.master_seed = ctx.common.seed;
        cfg.rho = rho;
        cfg.canvas = canvas_spec(width, height);
        cfg.reference_count = reference_count;
        cfg.existing_entries = merge ? static_cast<int>(source.entries.size()) : 0;
        cfg.rare_token = rare_token;
        cfg.class_noun = class_noun;
        const auto result = synth_augment(refs, pool, cfg, *generator, out_dir);

        DatasetManifest out;
        out.subject_id = source.subject_id;
        if (merge) {
          const fs::path out_abs = fs::absolute(out_dir);
          for (auto e : source.entries) {
            e.path = fs::relative(fs::absolute(mpath.parent_path() / e.path), out_abs).generic_string();
            out.entries.push_back(std::move(e));
          }
        }
        for (const auto& e : result.entries) out.entries.push_back(e);
        out.save(fs::path(out_dir) / "manifest.json");

        ojson j;
        j["manifest"] = (fs::path(out_dir) / "manifest.json").string();
        j["generated"] = result.entries.size();
        j["warnings"] = result.warnings;
        ojson failures = ojson::array();
        for (const auto& f : result.failures) failures.push_back({{"id", f.id}, {"error", f.error}});
        j["failures"] = failures;
        std::string text = "generated " + std::to_string(result.entries.size()) + " entries\n";
        for (const auto& w : result.warnings) text += "warning: " + w + "\n";
        emit(ctx, j, text);
        if (!result.failures.empty()) fail(ErrorKind::generation_failed, std::to_string(result.failures.size()) + " samples failed");
      };
    });
  }

  // serve
  std::string host, state_dir, static_dir;
  int port = -1;
  {
    auto* sub = command("serve", "Run the HTTP application server");
    sub->add_option("--host", host);
    sub->add_option("--port", port, "0 picks a free port");
    sub->add_option("--state-dir", state_dir);
    sub->add_option("--static-dir", static_dir);
    sub->callback([&] {
      action = [&](Context& ctx) {
        AppConfig cfg = ctx.config;
        if (!host.empty()) cfg.host = host;
        if (port >= 0) cfg.port = port;
        if (!state_dir.empty()) cfg.state_dir = state_dir;
        if (!static_dir.empty()) cfg.static_dir = fs::path(static_dir);
        AppServer server(cfg, ctx.backend());
        const int bound = server.bind(cfg.host, cfg.port);
        ctx.out << "listening on http://" << cfg.host << ':' << bound << "/api/v1" << std::endl;
        active_server = &server;
        std::signal(SIGINT, stop_server);
        std::signal(SIGTERM, stop_server);
        server.listen();
        active_server = nullptr;
      };
    });
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return 2;
  }

  Context ctx{common, {}, out};
  ctx.seed_given = seed_opt->count() > 0;
  try {
    ctx.config = load_config(common.config.empty() ? std::nullopt : std::optional<fs::path>(common.config));
    action(ctx);
  } catch (const Error& e) {
    ojson d;
    d["error"] = to_string(e.kind());
    d["message"] = e.what();
    if (const auto* sf = dynamic_cast<const SolverFailed*>(&e)) d["residual"] = sf->residual();
    err << d.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    ojson d;
    d["error"] = "internal";
    d["message"] = e.what();
    err << d.dump() << '\n';
    return 1;
  }
  return 0;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_dispatch(args, std::cout, std::cerr);
}

}  // namespace pforge
