#include <cstdint>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "hamr/evalcli.hpp"
#include "hamr/gradcheck.hpp"
#include "hamr/kspace.hpp"
#include "hamr/png.hpp"
#include "hamr/rng.hpp"

namespace hamr::evalcli {

namespace {

namespace d = diff;

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    ensure(f.good(), "cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    ensure(f.good(), "cannot open " + path + " for writing");
    f << content;
    ensure(f.good(), "write failed for " + path);
}

Tensor rand_real(std::vector<int64_t> shape, std::mt19937_64& rng, double lo = -1.0,
                 double hi = 1.0) {
    Tensor t(std::move(shape), Dtype::Real64);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (int64_t i = 0; i < t.numel(); ++i) t.r(i) = dist(rng);
    return t;
}

Tensor rand_complex(std::vector<int64_t> shape, std::mt19937_64& rng) {
    Tensor t(std::move(shape), Dtype::Complex128);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int64_t i = 0; i < t.numel(); ++i) t.set_c(i, {dist(rng), dist(rng)});
    return t;
}

// weighted-sum reduction so every output element reaches the loss
d::Var to_loss(d::Tape& t, d::Var out, uint64_t seed) {
    if (out.val().is_complex()) {
        if (out.val().rank() == 3)
            out = d::complex_to_channels(out);
        else
            out = d::abs_op(out);
    }
    auto rng = make_rng(seed, "cli-loss-weight");
    Tensor w = rand_real(out.val().shape(), rng, 0.5, 1.5);
    return d::sum(d::mul(out, t.constant(w)));
}

struct OpCheck {
    std::string name;
    std::function<d::Var(d::Tape&, const std::vector<d::Var>&)> graph;
    std::function<std::vector<Tensor>(std::mt19937_64&)> gen;
};

std::vector<OpCheck> op_checks() {
    std::vector<OpCheck> cases;
    auto push = [&](const std::string& name, auto graph, auto gen) {
        cases.push_back({name, graph, gen});
    };
    push("add",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::add(in[0], in[1]), 1);
         },
         [](std::mt19937_64& rng) {
             return std::vector<Tensor>{rand_complex({3, 4}, rng), rand_complex({3, 4}, rng)};
         });
    push("mul",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::mul(in[0], in[1]), 2);
         },
         [](std::mt19937_64& rng) {
             return std::vector<Tensor>{rand_complex({3, 4}, rng), rand_complex({3, 4}, rng)};
         });
    push("div",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::div(in[0], in[1]), 3);
         },
         [](std::mt19937_64& rng) {
             return std::vector<Tensor>{rand_real({3, 4}, rng), rand_real({3, 4}, rng, 1.0, 2.0)};
         });
    push("abs",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::abs_op(in[0]), 4);
         },
         [](std::mt19937_64& rng) {
             Tensor x = rand_complex({4, 4}, rng);
             for (int64_t i = 0; i < x.numel(); ++i)  // keep |x| away from the origin
                 if (std::abs(x.c(i)) < 0.3) x.set_c(i, x.c(i) + cplx{0.5, 0.5});
             return std::vector<Tensor>{x};
         });
    push("relu",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::relu(in[0]), 5);
         },
         [](std::mt19937_64& rng) {
             Tensor x = rand_real({4, 4}, rng);
             for (int64_t i = 0; i < x.numel(); ++i)  // keep clear of the kink
                 if (std::abs(x.r(i)) < 0.1) x.r(i) += 0.3;
             return std::vector<Tensor>{x};
         });
    push("tanh",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::tanh_op(in[0]), 6);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_real({4, 4}, rng)}; });
    push("sigmoid",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::sigmoid(in[0]), 7);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_real({4, 4}, rng)}; });
    push("softplus",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::softplus(in[0]), 8);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_real({4, 4}, rng)}; });
    push("conv2d",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::conv2d(in[0], in[1], in[2], 1, 1), 9);
         },
         [](std::mt19937_64& rng) {
             return std::vector<Tensor>{rand_real({1, 2, 5, 5}, rng), rand_real({3, 2, 3, 3}, rng),
                                        rand_real({3}, rng)};
         });
    push("instance_norm",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::instance_norm(in[0]), 10);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_real({2, 2, 4, 4}, rng)}; });
    push("softmax_vec",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::softmax_vec(in[0]), 11);
         },
         [](std::mt19937_64& rng) {
             return std::vector<Tensor>{rand_real({6}, rng, -2.0, 2.0)};
         });
    push("avg_pool2d",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::avg_pool2d(in[0], 2), 12);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_real({1, 2, 4, 4}, rng)}; });
    push("temporal_neighbor_channels",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::temporal_neighbor_channels(in[0], 1), 13);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_complex({3, 4, 4}, rng)}; });
    push("fft2",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::fft2_op(in[0]), 14);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_complex({2, 4, 4}, rng)}; });
    push("ifft2",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             return to_loss(t, d::ifft2_op(in[0]), 15);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_complex({2, 4, 4}, rng)}; });
    push("encode",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             auto rng2 = make_rng(21, "cli-enc");
             Tensor sens = rand_complex({2, 4, 4}, rng2);
             Tensor mask({2, 4, 4}, Dtype::Real64);
             std::bernoulli_distribution bd(0.6);
             for (int64_t i = 0; i < mask.numel(); ++i) mask.r(i) = bd(rng2) ? 1.0 : 0.0;
             mask.r(0) = 1.0;
             return to_loss(t, d::encode_op(in[0], sens, mask), 16);
         },
         [](std::mt19937_64& rng) { return std::vector<Tensor>{rand_complex({2, 4, 4}, rng)}; });
    push("adjoint",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             auto rng2 = make_rng(22, "cli-adj");
             Tensor sens = rand_complex({2, 4, 4}, rng2);
             return to_loss(t, d::adjoint_op(in[0], sens), 17);
         },
         [](std::mt19937_64& rng) {
             return std::vector<Tensor>{rand_complex({2, 2, 4, 4}, rng)};
         });
    push("mask_mul",
         [](d::Tape& t, const std::vector<d::Var>& in) {
             auto rng2 = make_rng(23, "cli-mask");
             Tensor mask({2, 4, 4}, Dtype::Real64);
             std::bernoulli_distribution bd(0.5);
             for (int64_t i = 0; i < mask.numel(); ++i) mask.r(i) = bd(rng2) ? 1.0 : 0.0;
             mask.r(1) = 1.0;
             return to_loss(t, d::mask_mul(in[0], mask), 18);
         },
         [](std::mt19937_64& rng) {
             return std::vector<Tensor>{rand_complex({2, 2, 4, 4}, rng)};
         });
    return cases;
}

int cmd_grad_check(double tol) {
    bool all_ok = true;
    auto row = [&](const std::string& name, double err, double row_tol) {
        bool ok = err <= row_tol;
        all_ok = all_ok && ok;
        std::printf("%-28s %11.3e  (tol %.1e)  %s\n", name.c_str(), err, row_tol,
                    ok ? "ok" : "FAIL");
    };

    for (const OpCheck& oc : op_checks()) {
        auto rng = make_rng(5, "cli-gradcheck-" + oc.name);
        auto rep = d::grad_check(oc.name, oc.graph, oc.gen(rng));
        row(oc.name, rep.max_rel_err, tol);
    }

    // composed pipelines get a 10x looser bar: FD noise compounds
    const double pipe_tol = 10.0 * tol;
    {
        adapters::AdapterConfig acfg;
        acfg.channels = 16;
        adapters::AdapterParams p = adapters::make_adapter(acfg, 31);
        auto rng = make_rng(32, "cli-gradcheck-adapter");
        std::vector<Tensor> inputs{rand_real({2, 8, 8}, rng, 0.1, 1.0)};
        std::vector<std::string> names{"x"};
        adapters::for_each_param(p, "a", [&](const std::string& name, Tensor& v) {
            inputs.push_back(v);
            names.push_back(name);
        });
        auto graph = [&](d::Tape& t, const std::vector<d::Var>& in) {
            adapters::BoundAdapter b = adapters::bind_vars(p, {in.begin() + 1, in.end()});
            return to_loss(t, adapters::adapter_apply(in[0], b), 33);
        };
        auto rep = d::grad_check("adapter block", graph, inputs, names, 12);
        row("adapter block", rep.max_rel_err, pipe_tol);
    }
    {
        backbone::BackboneConfig bcfg;
        bcfg.cascades = 2;
        bcfg.width = 4;
        backbone::Model m = backbone::make_model(bcfg, 41);
        auto rng = make_rng(42, "cli-gradcheck-recon");
        const int64_t T = 2, H = 8, W = 8;
        Tensor sens = synth::sens_maps(2, H, W, 43);
        kspace::SamplingMask mask = kspace::make_mask(kspace::MaskKind::Uniform, T, H, W, 2.0, 2, 44);
        Tensor y = kspace::forward_encode(rand_complex({T, H, W}, rng), sens, mask.pattern);
        Tensor target = rand_real({T, H, W}, rng, 0.1, 1.0);
        std::vector<Tensor> inputs;
        std::vector<std::string> names;
        backbone::for_each_param(m, [&](const std::string& name, const Tensor& v) {
            inputs.push_back(v);
            names.push_back(name);
        });
        auto graph = [&](d::Tape& t, const std::vector<d::Var>& in) {
            backbone::BoundModel bm = backbone::bind_vars(m, in);
            d::Var img = backbone::reconstruct(t, bm, y, sens, mask.pattern);
            d::Var diff = d::sub(img, t.constant(target));
            return d::mean(d::mul(diff, diff));
        };
        auto rep = d::grad_check("reconstruct 2-cascade", graph, inputs, names, 8);
        row("reconstruct 2-cascade", rep.max_rel_err, pipe_tol);
    }

    std::printf("grad-check: %s\n", all_ok ? "all passed" : "FAILURES");
    return all_ok ? 0 : 1;
}

int cmd_gen_data(const std::string& config, const std::string& out, int64_t seed_flag) {
    RunConfig cfg = RunConfig::from_json_text(read_file(config));
    if (seed_flag >= 0) cfg.seed = static_cast<uint64_t>(seed_flag);
    synth::Dataset ds = synth::generate_dataset(cfg.fleet, cfg.seed);
    synth::write_dataset(ds, out);
    std::printf("wrote %zu cases (%zu centers, %zu protocols, seed %llu) to %s\n",
                ds.cases.size(), ds.centers.size(), ds.protocols.size(),
                static_cast<unsigned long long>(cfg.seed), out.c_str());
    return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out) {
    RunConfig cfg = RunConfig::from_json_text(read_file(config));
    synth::Dataset ds = synth::read_dataset(data);
    auto [tr, va] = plan_split(cfg, ds);
    std::printf("training on %zu cases, validating on %zu\n", tr.size(), va.size());
    train::TrainResult res = train::train(cfg.train, ds, tr, va);
    train::save_checkpoint(res.checkpoint, out);
    write_file(out + "/metrics.csv", train::metrics_csv(res.log));
    if (res.aborted_nan) {
        std::printf("training aborted on a non-finite loss; kept the last good state in %s\n",
                    out.c_str());
        return 1;
    }
    std::printf("best val SSIM %.5f (epoch %lld); checkpoint in %s\n",
                res.checkpoint.state.best_val_ssim,
                static_cast<long long>(res.checkpoint.state.best_epoch), out.c_str());
    return 0;
}

int cmd_finetune(const std::string& config, const std::string& checkpoint,
                 const std::string& data, const std::string& out) {
    RunConfig cfg = RunConfig::from_json_text(read_file(config));
    train::Checkpoint ck = train::load_checkpoint(checkpoint);
    synth::Dataset ds = synth::read_dataset(data);
    auto [tr, va] = plan_split(cfg, ds);
    std::map<std::string, double> baseline = per_center_ssim(ck, ds, tr, ck.has_adapters);
    for (const auto& [center, ssim] : baseline)
        std::printf("pre-finetune SSIM %s: %.5f\n", center.c_str(), ssim);
    train::TrainResult res = train::progressive_finetune(cfg.train, ck, ds, tr, va, baseline);
    train::save_checkpoint(res.checkpoint, out);
    write_file(out + "/metrics.csv", train::metrics_csv(res.log));
    if (res.aborted_nan) {
        std::printf("fine-tune aborted on a non-finite loss; kept the last good state in %s\n",
                    out.c_str());
        return 1;
    }
    std::printf("best val SSIM %.5f; checkpoint in %s\n", res.checkpoint.state.best_val_ssim,
                out.c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& mode_str,
             const std::string& out_csv) {
    train::Checkpoint ck = train::load_checkpoint(checkpoint);
    synth::Dataset ds = synth::read_dataset(data);
    ModeReport rep = evaluate(ck, ds, mode_from_string(mode_str));
    write_file(out_csv, mode_csv(rep));
    std::fputs(routing_audit_csv(rep).c_str(), stdout);  // one routing line per case
    std::printf("%s overall: SSIM %.5f, PSNR %.3f over %lld cases; rows in %s\n",
                mode_name(rep.mode).c_str(), rep.overall_ssim, rep.overall_psnr,
                static_cast<long long>(rep.total_cases), out_csv.c_str());
    return 0;
}

int cmd_recon(const std::string& checkpoint, const std::string& data, const std::string& case_id,
              const std::string& out_png) {
    train::Checkpoint ck = train::load_checkpoint(checkpoint);
    synth::Dataset ds = synth::read_dataset(data);
    const synth::Case* cs = nullptr;
    for (const synth::Case& c : ds.cases)
        if (c.case_id == case_id) cs = &c;
    ensure(cs != nullptr, "no case " + case_id + " in " + data);

    Tensor zf = kspace::zero_filled_recon(cs->y);
    Tensor recon = train::reconstruct_case(ck, *cs, ck.has_adapters);
    // rows: zero-filled, model, ground truth; columns: image, k-space
    std::vector<std::vector<png::Gray8>> grid;
    for (const Tensor* img : std::initializer_list<const Tensor*>{&zf, &recon, &cs->gt_image})
        grid.push_back({png::frame_gray8(*img, 0), png::kspace_log_gray8(*img, 0)});
    png::write_file(out_png, png::tile(grid));
    std::printf("wrote %s (rows: zero-filled, model, ground truth; frame 0)\n", out_png.c_str());
    return 0;
}

int cmd_report(const std::string& checkpoint, double ceiling, const std::string& out_csv) {
    train::Checkpoint ck = train::load_checkpoint(checkpoint);
    EfficiencyReport rep = report_param_efficiency(ck, ceiling);
    std::fputs(rep.text.c_str(), stdout);
    if (!out_csv.empty()) write_file(out_csv, rep.csv);
    return rep.ok ? 0 : 1;
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"hierarchical-adapter MRI reconstruction toolkit"};
    app.require_subcommand(1);

    std::string config, data, out, checkpoint, mode = "adapted", out_csv, case_id, out_png;
    int64_t seed_flag = -1;
    double tol = 1e-5, ceiling = 0.05;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic multi-center dataset");
    gen->add_option("--config", config, "run config JSON")->required();
    gen->add_option("--out", out, "output dataset directory")->required();
    gen->add_option("--seed", seed_flag, "override the config seed");

    CLI::App* tr = app.add_subcommand("train", "train a model on a generated dataset");
    tr->add_option("--config", config, "run config JSON")->required();
    tr->add_option("--data", data, "dataset directory")->required();
    tr->add_option("--out", out, "checkpoint output directory")->required();

    CLI::App* ft = app.add_subcommand("finetune", "progressively fine-tune a checkpoint");
    ft->add_option("--config", config, "run config JSON")->required();
    ft->add_option("--checkpoint", checkpoint, "starting checkpoint directory")->required();
    ft->add_option("--data", data, "dataset directory")->required();
    ft->add_option("--out", out, "checkpoint output directory")->required();

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint per center");
    ev->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    ev->add_option("--data", data, "dataset directory")->required();
    ev->add_option("--mode", mode, "zero_filled | baseline | adapted");
    ev->add_option("--out-csv", out_csv, "per-center CSV output path")->required();

    CLI::App* rc = app.add_subcommand("recon", "render one case as a PNG panel grid");
    rc->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    rc->add_option("--data", data, "dataset directory")->required();
    rc->add_option("--case", case_id, "case id to render")->required();
    rc->add_option("--out-png", out_png, "PNG output path")->required();

    CLI::App* gc = app.add_subcommand("grad-check", "finite-difference check of the op set");
    gc->add_option("--tol", tol, "relative tolerance for single ops");

    CLI::App* rp = app.add_subcommand("report", "parameter-efficiency report");
    rp->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    rp->add_option("--ceiling", ceiling, "maximum allowed adapter fraction");
    rp->add_option("--out-csv", out_csv, "also write the counts as CSV");

    // CLI11 wants argv order reversed
    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config, out, seed_flag);
        if (tr->parsed()) return cmd_train(config, data, out);
        if (ft->parsed()) return cmd_finetune(config, checkpoint, data, out);
        if (ev->parsed()) return cmd_eval(checkpoint, data, mode, out_csv);
        if (rc->parsed()) return cmd_recon(checkpoint, data, case_id, out_png);
        if (gc->parsed()) return cmd_grad_check(tol);
        if (rp->parsed()) return cmd_report(checkpoint, ceiling, out_csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;  // unreachable with require_subcommand(1)
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace hamr::evalcli
