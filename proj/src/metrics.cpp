#include "dcr/metrics.hpp"

#include "dcr/error.hpp"
#include "dcr/io.hpp"
#include "dcr/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace dcr {

namespace {

std::uint64_t activation_elements(std::size_t tokens, std::size_t k, std::size_t d,
                                  std::size_t mlp_ratio, std::size_t heads) {
    // Normalized input, q/k/v, attention output, MLP hidden and output per
    // processed token, attention probabilities per head, and the router score
    // of every token.
    const std::uint64_t per_token = (6 + mlp_ratio) * d;
    return k * per_token + heads * k * k + tokens;
}

double median(std::vector<double> values) {
    const auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
    std::nth_element(values.begin(), mid, values.end());
    if (values.size() % 2 == 1) return *mid;
    const double upper = *mid;
    const double lower = *std::max_element(values.begin(), mid);
    return 0.5 * (lower + upper);
}

template <class F>
double seconds(F&& f) {
    const auto start = std::chrono::steady_clock::now();
    f();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

Tensor random_tensor(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = stddev * rng.normal();
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

std::string header(const std::string& config_hash) {
    return "# config_hash=" + config_hash + "\n";
}

} // namespace

LayerFlops flops_of_layer(std::size_t tokens, std::size_t k, std::size_t width, std::size_t mlp_ratio) {
    if (k > tokens) {
        throw ArgumentError("flops_of_layer: k " + std::to_string(k) + " exceeds " +
                            std::to_string(tokens) + " tokens");
    }
    const std::uint64_t n = tokens, kk = k, d = width;
    LayerFlops f;
    f.router = n * d;
    f.attention = 4 * kk * d * d + 2 * kk * kk * d;
    f.mlp = 2 * kk * d * (mlp_ratio * d);
    return f;
}

LayerFlops dense_layer_flops(std::size_t tokens, std::size_t width, std::size_t mlp_ratio) {
    LayerFlops f = flops_of_layer(tokens, tokens, width, mlp_ratio);
    f.router = 0;
    return f;
}

FlopsReport flops_of_run(const ModelConfig& config, const RatioTable& snapped) {
    if (!snapped.is_snapped()) throw PreconditionError("flops_of_run: ratio table is not snapped");
    if (snapped.layers() != config.layers || snapped.regions() != config.regions) {
        throw DimensionError("flops_of_run: table " + shape_str(snapped.tensor().shape()) +
                             " does not match the config");
    }
    const std::size_t n = config.tokens(), d = config.hidden_dim;
    FlopsReport r;
    r.layers = config.layers;
    r.regions = config.regions;
    r.forward_total.assign(r.regions, 0);
    const LayerFlops dense = dense_layer_flops(n, d, config.mlp_ratio);
    r.dense_forward = dense.total() * r.layers;
    r.dense_activations =
        r.layers * (activation_elements(n, n, d, config.mlp_ratio, config.heads) - n);
    std::vector<std::uint64_t> region_activations(r.regions, 0);
    for (std::size_t l = 0; l < r.layers; ++l) {
        for (std::size_t g = 0; g < r.regions; ++g) {
            const std::size_t k = k_of_ratio(snapped.value(l, g), n);
            r.per_layer_region.push_back(flops_of_layer(n, k, d, config.mlp_ratio));
            r.forward_total[g] += r.per_layer_region.back().total();
            region_activations[g] += activation_elements(n, k, d, config.mlp_ratio, config.heads);
        }
    }
    r.activations = *std::max_element(region_activations.begin(), region_activations.end());
    for (std::size_t t : sampling_timesteps(config.train_timesteps, config.sample_steps)) {
        const std::size_t g = region_of_timestep(t, config.train_timesteps, config.regions);
        r.run_total += 2 * r.forward_total[g];
        r.dense_run += 2 * r.dense_forward;
    }
    r.savings = 1.0 - static_cast<double>(r.run_total) / static_cast<double>(r.dense_run);
    return r;
}

FlopsReport dense_flops_report(const ModelConfig& config) {
    FlopsReport r = flops_of_run(config, RatioTable(config.layers, config.regions));
    const LayerFlops dense = dense_layer_flops(config.tokens(), config.hidden_dim, config.mlp_ratio);
    std::fill(r.per_layer_region.begin(), r.per_layer_region.end(), dense);
    std::fill(r.forward_total.begin(), r.forward_total.end(), r.dense_forward);
    r.run_total = r.dense_run;
    r.activations = r.dense_activations;
    r.savings = 0.0;
    return r;
}

std::string flops_report_csv(const FlopsReport& report, const std::string& config_hash) {
    std::ostringstream out;
    out << header(config_hash);
    out << "# dense_forward=" << report.dense_forward << " dense_run=" << report.dense_run
        << " run_total=" << report.run_total << " savings=" << format_double(report.savings)
        << " activations=" << report.activations
        << " dense_activations=" << report.dense_activations << "\n";
    out << "layer,region,router,attention,mlp,total\n";
    for (std::size_t l = 0; l < report.layers; ++l) {
        for (std::size_t g = 0; g < report.regions; ++g) {
            const LayerFlops& f = report.at(l, g);
            out << l << ',' << g << ',' << f.router << ',' << f.attention << ',' << f.mlp << ','
                << f.total() << '\n';
        }
    }
    return out.str();
}

std::vector<BenchRow> benchmark_routing(std::size_t tokens, std::size_t width,
                                        std::span<const double> ratios, std::size_t repetitions,
                                        std::size_t heads, std::uint64_t seed) {
    if (tokens == 0 || width == 0 || repetitions == 0) {
        throw ArgumentError("benchmark_routing: tokens, width and repetitions must be positive");
    }
    ModelConfig config;
    config.hidden_dim = width;
    config.heads = heads;
    Rng rng(seed);
    BlockParams block = BlockParams::init(config, rng);
    // Non-zero projections so every matmul does real work.
    for (Tensor* t : {&block.wo, &block.w2, &block.ada_w}) {
        *t = random_tensor(t->shape(), rng, 0.02, false);
    }
    RouterParams router{random_tensor({width, 1}, rng, 0.1, false), Tensor::zeros({1})};
    const Tensor hidden = random_tensor({tokens, width}, rng, 1.0, false);
    const Tensor cond = random_tensor({1, width}, rng, 1.0, false);
    const RoutingOptions options{heads, true};
    constexpr int kWarmup = 3;

    std::vector<BenchRow> rows;
    for (double ratio : ratios) {
        BenchRow row;
        row.ratio = ratio;
        row.k = k_of_ratio(ratio, tokens);
        auto dense = [&] { return add(hidden, block_forward(hidden, cond, block, heads)); };
        auto routed = [&] { return routed_block_forward(hidden, cond, block, router, ratio, options); };
        auto machinery = [&] {
            const Tensor scores = router_scores(hidden, router);
            const auto idx = topk_indices(scores.data(), row.k);
            return scatter_rows(hidden, gather_rows(hidden, idx), idx);
        };
        for (int i = 0; i < kWarmup; ++i) {
            dense();
            routed();
            machinery();
        }
        std::vector<double> dense_t, routed_t, machinery_t;
        for (std::size_t i = 0; i < repetitions; ++i) {
            dense_t.push_back(seconds(dense));
            routed_t.push_back(seconds(routed));
            machinery_t.push_back(seconds(machinery));
        }
        row.dense_seconds = median(dense_t);
        row.routed_seconds = median(routed_t);
        // Separate medians; at k = 0 the machinery is the whole routed run.
        row.overhead_fraction = std::min(1.0, median(machinery_t) / row.routed_seconds);
        rows.push_back(row);
    }
    return rows;
}

std::string bench_csv(std::span<const BenchRow> rows, const std::string& config_hash) {
    std::ostringstream out;
    out << header(config_hash);
    out << "ratio,k,dense_seconds,routed_seconds,relative,overhead_fraction\n";
    for (const BenchRow& r : rows) {
        out << format_double(r.ratio) << ',' << r.k << ',' << format_double(r.dense_seconds) << ','
            << format_double(r.routed_seconds) << ',' << format_double(r.relative()) << ','
            << format_double(r.overhead_fraction) << '\n';
    }
    return out.str();
}

void TrajectoryLog::append(std::uint64_t step, const RatioTable& table, const StepLosses& losses) {
    if (!rows_.empty() && step <= rows_.back().step) {
        throw ArgumentError("trajectory: step " + std::to_string(step) + " does not follow " +
                            std::to_string(rows_.back().step));
    }
    for (std::size_t l = 0; l < table.layers(); ++l) {
        for (std::size_t g = 0; g < table.regions(); ++g) {
            rows_.push_back(TrajectoryRow{step, l, g, table.value(l, g), losses.batch_mean_ratio,
                                          losses.total, losses.diffusion, losses.ratio});
        }
    }
}

std::string TrajectoryLog::to_csv(const std::string& config_hash) const {
    std::ostringstream out;
    out << header(config_hash);
    out << "step,layer,region,ratio,batch_mean_ratio,total_loss,diffusion_loss,ratio_loss\n";
    for (const TrajectoryRow& r : rows_) {
        out << r.step << ',' << r.layer << ',' << r.region << ',' << format_double(r.ratio) << ','
            << format_double(r.batch_mean) << ',' << format_double(r.total_loss) << ','
            << format_double(r.diffusion_loss) << ',' << format_double(r.ratio_loss) << '\n';
    }
    return out.str();
}

std::string to_pgm(std::span<const double> values, std::size_t width, std::size_t height,
                   const std::string& config_hash) {
    if (values.size() != width * height) {
        throw DimensionError("to_pgm: " + std::to_string(values.size()) + " values for " +
                             std::to_string(width) + "x" + std::to_string(height));
    }
    std::ostringstream out;
    out << "P2\n# config_hash=" << config_hash << "\n" << width << ' ' << height << "\n255\n";
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const double v = std::clamp(values[y * width + x], 0.0, 1.0);
            out << (x ? " " : "") << static_cast<int>(std::lround(v * 255.0));
        }
        out << '\n';
    }
    return out.str();
}

PgmImage parse_pgm(const std::string& text) {
    std::istringstream in(text);
    std::string token;
    PgmImage img;
    auto next = [&]() -> std::string {
        std::string t;
        while (in >> t) {
            if (t[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                if (img.comment.empty()) img.comment = (t.substr(1) + rest);
                continue;
            }
            return t;
        }
        throw FormatError("pgm: unexpected end of data");
    };
    if (next() != "P2") throw FormatError("pgm: expected P2 magic");
    img.width = parse_u64(next(), "pgm width");
    img.height = parse_u64(next(), "pgm height");
    if (parse_u64(next(), "pgm maxval") != 255) throw FormatError("pgm: maxval must be 255");
    img.pixels.resize(img.width * img.height);
    for (int& p : img.pixels) {
        const auto v = parse_u64(next(), "pgm pixel");
        if (v > 255) throw FormatError("pgm: pixel above maxval");
        p = static_cast<int>(v);
    }
    return img;
}

std::string image_to_pgm(const Tensor& image, const std::string& config_hash) {
    std::vector<double> unit(image.numel());
    for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = 0.5 * (image.data()[i] + 1.0);
    return to_pgm(unit, image.cols(), image.rows(), config_hash);
}

double RouterMap::mean() const {
    double total = 0.0;
    for (double s : scores) total += s;
    return scores.empty() ? 0.0 : total / static_cast<double>(scores.size());
}

std::vector<RouterMap> emit_router_maps(const DiT& model, const RatioTable& snapped,
                                        const Tensor& image, std::size_t cls, std::uint64_t noise_seed,
                                        std::span<const std::size_t> timesteps,
                                        std::span<const std::size_t> layers,
                                        const std::filesystem::path& out_dir,
                                        const std::string& config_hash) {
    const ModelConfig& config = model.config();
    const std::size_t grid = config.grid();
    const NoiseSchedule schedule = make_schedule(config.train_timesteps);
    Rng rng(noise_seed);
    std::vector<double> eps(image.numel());
    for (double& e : eps) e = rng.normal();
    const Tensor noise(image.shape(), std::move(eps));
    std::vector<RouterMap> maps;
    for (std::size_t t : timesteps) {
        std::vector<SelectionRecord> selections;
        ForwardOptions options;
        options.selections = &selections;
        model.forward(q_sample(image, t, noise, schedule), t, cls, &snapped, options);
        for (std::size_t l : layers) {
            if (l >= selections.size()) {
                throw ArgumentError("emit_router_maps: layer " + std::to_string(l) + " outside [0, " +
                                    std::to_string(selections.size()) + ")");
            }
            RouterMap map{l, t, grid, selections[l].scores, {}};
            map.file = out_dir / ("router_l" + std::to_string(l) + "_t" + std::to_string(t) + ".pgm");
            write_file(map.file, to_pgm(map.scores, grid, grid, config_hash));
            maps.push_back(std::move(map));
        }
    }
    return maps;
}

std::string ratio_heatmap_csv(const RatioTable& table, const std::string& config_hash) {
    std::ostringstream out;
    out << header(config_hash) << "layer";
    for (std::size_t g = 0; g < table.regions(); ++g) out << ",r" << g;
    out << '\n';
    for (std::size_t l = 0; l < table.layers(); ++l) {
        out << l;
        for (std::size_t g = 0; g < table.regions(); ++g) out << ',' << format_double(table.value(l, g));
        out << '\n';
    }
    return out.str();
}

RatioTable parse_ratio_heatmap(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t regions = 0;
    bool have_header = false;
    std::vector<double> values;
    std::size_t layers = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto cells = split(line, ',');
        if (!have_header) {
            if (cells.empty() || cells[0] != "layer") throw FormatError("heatmap: missing header row");
            regions = cells.size() - 1;
            have_header = true;
            continue;
        }
        if (cells.size() != regions + 1) {
            throw FormatError("heatmap: row " + std::to_string(layers) + " has " +
                              std::to_string(cells.size()) + " cells, expected " +
                              std::to_string(regions + 1));
        }
        if (parse_u64(cells[0], "heatmap layer") != layers) throw FormatError("heatmap: layers out of order");
        for (std::size_t g = 0; g < regions; ++g) values.push_back(parse_double(cells[g + 1], "heatmap ratio"));
        ++layers;
    }
    if (!have_header || layers == 0 || regions == 0) throw FormatError("heatmap: no data rows");
    return RatioTable(Tensor({layers, regions}, std::move(values)));
}

void emit_ratio_heatmap(const RatioTable& table, const std::filesystem::path& path,
                        const std::string& config_hash) {
    write_file(path, ratio_heatmap_csv(table, config_hash));
}

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw ArgumentError("pearson: need equal, non-empty inputs");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

} // namespace dcr
