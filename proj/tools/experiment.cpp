#include "experiment.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "bglab/combinatorics.hpp"
#include "bglab/duhamel.hpp"
#include "bglab/ensemble.hpp"
#include "bglab/kinetic.hpp"
#include "bglab/observables.hpp"

namespace bglab::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

ojson ValidationReport::to_json() const {
    auto list = [](const std::vector<Finding>& v) {
        ojson a = ojson::array();
        for (const auto& f : v) a.push_back({{"field", f.field}, {"message", f.message}});
        return a;
    };
    ojson j;
    j["valid"] = ok();
    j["errors"] = list(errors);
    j["warnings"] = list(warnings);
    return j;
}

namespace {

const std::set<std::string> kKinds{"simulate", "estimate", "kinetic", "covariance", "duhamel", "selftest"};

struct SchemaError : std::runtime_error {
    std::vector<Finding> findings;
    explicit SchemaError(std::vector<Finding> f) : std::runtime_error("schema violation"), findings(std::move(f)) {}
    SchemaError(const std::string& field, const std::string& message) : SchemaError(std::vector<Finding>{{field, message}}) {}
};

// ---- validation ------------------------------------------------------------

class Checker {
public:
    explicit Checker(ValidationReport& r) : r_(r) {}

    void error(const std::string& f, const std::string& m) { r_.errors.push_back({f, m}); }
    void warn(const std::string& f, const std::string& m) { r_.warnings.push_back({f, m}); }

    const json* get(const json& obj, const std::string& path, const std::string& key, bool required) {
        const auto it = obj.find(key);
        if (it == obj.end()) {
            if (required) error(path + key, "missing required field");
            return nullptr;
        }
        return &*it;
    }

    const json* object(const json& obj, const std::string& path, const std::string& key, bool required) {
        const json* v = get(obj, path, key, required);
        if (v && !v->is_object()) {
            error(path + key, "must be an object");
            return nullptr;
        }
        return v;
    }

    std::optional<double> number(const json& obj, const std::string& path, const std::string& key, bool required,
                                 double lo, double hi, bool lo_open = false) {
        const json* v = get(obj, path, key, required);
        if (!v) return std::nullopt;
        if (!v->is_number()) {
            error(path + key, "must be a number");
            return std::nullopt;
        }
        const double x = v->get<double>();
        if (!std::isfinite(x) || x < lo || x > hi || (lo_open && x == lo)) {
            std::ostringstream os;
            os << "must lie in " << (lo_open ? "(" : "[") << lo << ", " << hi << "]";
            error(path + key, os.str());
            return std::nullopt;
        }
        return x;
    }

    std::optional<long long> integer(const json& obj, const std::string& path, const std::string& key,
                                     bool required, long long lo, long long hi) {
        const json* v = get(obj, path, key, required);
        if (!v) return std::nullopt;
        if (!v->is_number_integer()) {
            error(path + key, "must be an integer");
            return std::nullopt;
        }
        if (v->is_number_unsigned() && v->get<std::uint64_t>() > static_cast<std::uint64_t>(hi)) {
            error(path + key, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            return std::nullopt;
        }
        const long long x = v->get<long long>();
        if (x < lo || x > hi) {
            error(path + key, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            return std::nullopt;
        }
        return x;
    }

    std::optional<std::string> choice(const json& obj, const std::string& path, const std::string& key, bool required,
                                      const std::set<std::string>& allowed) {
        const json* v = get(obj, path, key, required);
        if (!v) return std::nullopt;
        if (!v->is_string() || !allowed.count(v->get<std::string>())) {
            std::string list;
            for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
            error(path + key, "must be one of: " + list);
            return std::nullopt;
        }
        return v->get<std::string>();
    }

    std::optional<std::vector<double>> numbers(const json& obj, const std::string& path, const std::string& key,
                                               bool required, std::size_t min_size, std::size_t exact = 0) {
        const json* v = get(obj, path, key, required);
        if (!v) return std::nullopt;
        if (!v->is_array() || v->size() < min_size || (exact && v->size() != exact)) {
            error(path + key, exact ? "must be an array of " + std::to_string(exact) + " numbers"
                                    : "must be an array of at least " + std::to_string(min_size) + " numbers");
            return std::nullopt;
        }
        std::vector<double> out;
        for (const auto& x : *v) {
            if (!x.is_number() || !std::isfinite(x.get<double>())) {
                error(path + key, "entries must be finite numbers");
                return std::nullopt;
            }
            out.push_back(x.get<double>());
        }
        return out;
    }

    std::optional<bool> boolean(const json& obj, const std::string& path, const std::string& key, bool required) {
        const json* v = get(obj, path, key, required);
        if (!v) return std::nullopt;
        if (!v->is_boolean()) {
            error(path + key, "must be a boolean");
            return std::nullopt;
        }
        return v->get<bool>();
    }

private:
    ValidationReport& r_;
};

void check_function(Checker& c, const json& f, const std::string& path) {
    if (!f.is_object()) return c.error(path, "must be an object");
    const auto type = c.choice(f, path + ".", "type", true, {"constant", "polynomial", "bump", "box"});
    if (!type) return;
    const std::string p = path + ".";
    if (*type == "constant") {
        c.number(f, p, "value", true, -1e300, 1e300);
    } else if (*type == "polynomial") {
        const json* terms = c.get(f, p, "terms", true);
        if (!terms) return;
        if (!terms->is_array() || terms->empty()) return c.error(p + "terms", "must be a nonempty array");
        for (std::size_t k = 0; k < terms->size(); ++k) {
            const std::string tp = p + "terms[" + std::to_string(k) + "].";
            const json& t = (*terms)[k];
            if (!t.is_object()) {
                c.error(tp.substr(0, tp.size() - 1), "must be an object");
                continue;
            }
            c.number(t, tp, "coef", true, -1e300, 1e300);
            const json* e = c.get(t, tp, "exp", true);
            if (e && (!e->is_array() || e->size() != 3 ||
                      !std::all_of(e->begin(), e->end(),
                                   [](const json& x) { return x.is_number_integer() && x >= 0 && x <= 8; })))
                c.error(tp + "exp", "must be three integer exponents in [0, 8]");
        }
    } else if (*type == "bump") {
        c.numbers(f, p, "center", true, 3, 3);
        c.number(f, p, "width", true, 0.0, 1e300, true);
        c.number(f, p, "amplitude", false, -1e300, 1e300);
    } else {
        const auto lo = c.numbers(f, p, "vlo", true, 3, 3), hi = c.numbers(f, p, "vhi", true, 3, 3);
        if (lo && hi)
            for (int a = 0; a < 3; ++a)
                if (!((*lo)[a] < (*hi)[a])) c.error(p + "vhi", "must exceed vlo componentwise");
    }
}

void check_law(Checker& c, const json& law, const std::string& p) {
    const auto profile = c.choice(law, p, "profile", true, {"maxwellian", "bimodal", "tabulated"});
    c.number(law, p, "mass", false, 0.0, 1e6, true);
    if (!profile) return;
    if (*profile != "tabulated") c.number(law, p, "beta", true, 0.0, 1e6, true);
    if (*profile == "bimodal") c.number(law, p, "separation", true, 0.0, 1e3);
    if (*profile == "tabulated") {
        const auto nodes = c.numbers(law, p, "nodes", true, 2), values = c.numbers(law, p, "values", true, 2);
        if (nodes && !std::is_sorted(nodes->begin(), nodes->end(), std::less_equal<>()))
            c.error(p + "nodes", "must be strictly increasing");
        if (nodes && values && nodes->size() != values->size()) c.error(p + "values", "must match nodes in length");
        if (values && std::any_of(values->begin(), values->end(), [](double x) { return x < 0.0; }))
            c.error(p + "values", "must be nonnegative");
        c.number(law, p, "C0", true, 0.0, 1e300, true);
        c.number(law, p, "beta0", true, 0.0, 1e6, true);
    }
}

ens::InitialLaw parse_law(const json& j) {
    const std::string profile = j.at("profile");
    const double mass = j.value("mass", 1.0);
    if (profile == "maxwellian") return ens::InitialLaw::maxwellian(j.at("beta"), mass);
    if (profile == "bimodal") return ens::InitialLaw::bimodal(j.at("beta"), j.at("separation"), mass);
    return ens::InitialLaw::tabulated(j.at("nodes").get<std::vector<double>>(), j.at("values").get<std::vector<double>>(),
                                      j.at("C0"), j.at("beta0"), mass);
}

// Physical-range checks on a schema-valid system block.
void physical_checks(Checker& c, const json& sys, const std::string& kind) {
    const int d = sys.at("dimension");
    const double eps = sys.value("diameter", 0.0);
    const double mu_in = sys.value("intensity", 0.0);
    const bool dynamics = kind == "simulate" || kind == "estimate";
    if (eps == 0.0 && mu_in <= 0.0) {
        if (dynamics || kind == "duhamel") c.error("system.intensity", "diameter 0 needs an explicit intensity");
        return;
    }
    if (eps >= 0.5) c.warn("system.diameter", "diameter >= 1/2: the torus dynamics requires eps < 1/2");
    if (eps == 0.0) return;
    const double mu = mu_in > 0.0 ? mu_in : std::pow(eps, -(d - 1));
    const double bg = mu * std::pow(eps, d - 1);
    if (bg < 0.1 || bg > 10.0) {
        std::ostringstream os;
        os << "mu eps^(d-1) = " << bg << " is far from the Boltzmann-Grad scaling (inverse mean free path ~ 1)";
        c.warn("system.intensity", os.str());
    }
    double mass = 1.0;
    if (const auto it = sys.find("law"); it != sys.end() && it->is_object()) mass = it->value("mass", 1.0);
    const double ball = d == 2 ? std::numbers::pi * eps * eps : 4.0 / 3.0 * std::numbers::pi * eps * eps * eps;
    const double excluded = mu * mass * ball;
    if (excluded > 0.1) {
        std::ostringstream os;
        os << "non-dilute: expected particles within eps of a given one = " << excluded << " (> 0.1)";
        c.warn("system", os.str());
    }
    if (dynamics && std::exp(-0.5 * (mu * mass) * (mu * mass) * ball) < 1e-3)
        c.warn("system", "rejection-sampler acceptance below 1e-3: sampling will be refused");
}

void check_system(Checker& c, const json& spec, const std::string& kind) {
    const json* sys = c.object(spec, "", "system", true);
    if (!sys) return;
    const std::string p = "system.";
    const bool needs_eps = kind == "simulate" || kind == "estimate" || kind == "duhamel";
    const auto d = c.integer(*sys, p, "dimension", true, 2, 3);
    const auto eps = c.number(*sys, p, "diameter", needs_eps, 0.0, 1.0);
    c.number(*sys, p, "intensity", false, 0.0, 1e9);
    if (kind == "simulate" || kind == "estimate") {
        c.number(*sys, p, "horizon", true, 0.0, 1e6);
        c.integer(*sys, p, "replicas", true, kind == "estimate" ? 2 : 1, 100000000);
    }
    const json* law = c.object(*sys, p, "law", true);
    if (law) check_law(c, *law, p + "law.");
    if (d && (eps || !needs_eps)) physical_checks(c, *sys, kind);
}

void check_times(Checker& c, const json& block, const std::string& p, const json& spec) {
    const auto times = c.numbers(block, p, "times", true, 1);
    if (!times) return;
    if (!std::is_sorted(times->begin(), times->end(), std::less_equal<>()) || times->front() < 0.0)
        c.error(p + "times", "must be nonnegative and strictly increasing");
    const auto sys = spec.find("system");
    if (sys != spec.end() && sys->is_object() && sys->contains("horizon") && sys->at("horizon").is_number() &&
        times->back() > sys->at("horizon").get<double>())
        c.error(p + "times", "must not exceed system.horizon");
}

void check_function_ref(Checker& c, const json& spec, const json& name, const std::string& field) {
    if (!name.is_string()) return c.error(field, "must name an entry of functions");
    const auto fs_ = spec.find("functions");
    if (fs_ == spec.end() || !fs_->is_object() || !fs_->contains(name.get<std::string>()))
        c.error(field, "unknown function '" + name.get<std::string>() + "'");
}

void check_grid(Checker& c, const json& block, const std::string& p, int d) {
    const json* g = c.object(block, p, "grid", true);
    if (!g) return;
    c.integer(*g, p + "grid.", "M", true, 2, d == 3 ? 24 : 64);
    c.number(*g, p + "grid.", "vmax", true, 0.0, 100.0, true);
    c.integer(*g, p + "grid.", "sphere_nodes", false, 0, 512);
    c.choice(*g, p + "grid.", "interpolation", false, {"quadratic", "multilinear"});
}

int spec_dimension(const json& spec) {
    const auto s = spec.find("system");
    if (s == spec.end() || !s->is_object()) return 2;
    const auto d = s->find("dimension");
    return d != s->end() && d->is_number_integer() ? d->get<int>() : 2;
}

}  // namespace

ValidationReport validate_config(const json& spec) {
    ValidationReport r;
    Checker c(r);
    if (!spec.is_object()) {
        c.error("", "spec must be a JSON object");
        return r;
    }
    if (const auto v = c.integer(spec, "", "schema_version", true, 0, 1000000); v && *v != kSchemaVersion)
        c.error("schema_version", "unsupported schema version " + std::to_string(*v) + " (this tool reads " +
                                      std::to_string(kSchemaVersion) + ")");
    const auto kind = c.choice(spec, "", "kind", true, kKinds);
    c.integer(spec, "", "seed", true, 0, std::numeric_limits<long long>::max());
    if (const json* n = c.get(spec, "", "name", false)) {
        const std::string s = n->is_string() ? n->get<std::string>() : std::string();
        const bool good = !s.empty() && std::all_of(s.begin(), s.end(), [](char ch) {
            return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-';
        });
        if (!good) c.error("name", "must be a nonempty string of letters, digits, '_' or '-'");
    }
    if (const json* o = c.get(spec, "", "output", false); o && !o->is_string()) c.error("output", "must be a string");
    if (const json* f = c.object(spec, "", "functions", false))
        for (const auto& [name, body] : f->items()) check_function(c, body, "functions." + name);
    if (!kind) return r;

    const std::string p = *kind + ".";
    const int d = spec_dimension(spec);
    if (*kind != "selftest") check_system(c, spec, *kind);
    if (*kind == "selftest") {
        if (const json* b = c.object(spec, "", "selftest", false)) c.integer(*b, p, "max_n", false, 2, 7);
        return r;
    }
    const json* b = c.object(spec, "", *kind, true);
    if (!b) return r;
    if (*kind == "simulate") {
        check_times(c, *b, p, spec);
        const json* obs = c.get(*b, p, "observables", true);
        if (obs && (!obs->is_array() || obs->empty())) c.error(p + "observables", "must be a nonempty array");
        else if (obs)
            for (std::size_t k = 0; k < obs->size(); ++k) {
                const std::string op = p + "observables[" + std::to_string(k) + "].";
                const json& o = (*obs)[k];
                if (!o.is_object()) {
                    c.error(op.substr(0, op.size() - 1), "must be an object");
                    continue;
                }
                if (const json* f = c.get(o, op, "function", true)) check_function_ref(c, spec, *f, op + "function");
                c.choice(o, op, "statistic", true, {"pi", "square"});
            }
    } else if (*kind == "estimate") {
        check_times(c, *b, p, spec);
        const json* fl = c.get(*b, p, "functions", true);
        if (fl && (!fl->is_array() || fl->empty())) c.error(p + "functions", "must be a nonempty array of names");
        else if (fl)
            for (std::size_t k = 0; k < fl->size(); ++k)
                check_function_ref(c, spec, (*fl)[k], p + "functions[" + std::to_string(k) + "]");
        const json* q = c.get(*b, p, "quantities", true);
        const std::set<std::string> known{"mean", "f2", "covariance", "log_mgf"};
        if (q && (!q->is_array() || q->empty() ||
                  !std::all_of(q->begin(), q->end(),
                               [&](const json& x) { return x.is_string() && known.count(x.get<std::string>()); })))
            c.error(p + "quantities", "must be a nonempty subset of: covariance, f2, log_mgf, mean");
    } else if (*kind == "kinetic" || *kind == "covariance") {
        check_grid(c, *b, p, d);
        const auto T = c.number(*b, p, "T", true, 0.0, 1e4);
        const auto dt = c.number(*b, p, "dt", true, 0.0, 1e4, true);
        if (T && dt && *dt > *T && *T > 0.0) c.error(p + "dt", "must not exceed T");
        if (*kind == "kinetic") {
            const json* fl = c.get(*b, p, "functions", true);
            if (fl && (!fl->is_array() || fl->empty())) c.error(p + "functions", "must be a nonempty array of names");
            else if (fl)
                for (std::size_t k = 0; k < fl->size(); ++k)
                    check_function_ref(c, spec, (*fl)[k], p + "functions[" + std::to_string(k) + "]");
            if (const json* ds = c.object(*b, p, "dsmc", false)) {
                c.integer(*ds, p + "dsmc.", "N", true, 1000, 100000000);
                c.number(*ds, p + "dsmc.", "rate_scale", false, 1.0, 100.0);
                if (const auto t = c.numbers(*ds, p + "dsmc.", "times", false, 1);
                    t && (!std::is_sorted(t->begin(), t->end(), std::less_equal<>()) || t->front() < 0.0 ||
                          (T && t->back() > *T)))
                    c.error(p + "dsmc.times", "must be increasing within [0, T]");
            }
        } else {
            c.boolean(*b, p, "equilibrium", false);
            const json* pairs = c.get(*b, p, "pairs", true);
            if (pairs && (!pairs->is_array() || pairs->empty())) c.error(p + "pairs", "must be a nonempty array");
            else if (pairs)
                for (std::size_t k = 0; k < pairs->size(); ++k) {
                    const std::string pp = p + "pairs[" + std::to_string(k) + "]";
                    const json& pr = (*pairs)[k];
                    if (!pr.is_array() || pr.size() != 2) {
                        c.error(pp, "must be a pair of function names");
                        continue;
                    }
                    check_function_ref(c, spec, pr[0], pp + "[0]");
                    check_function_ref(c, spec, pr[1], pp + "[1]");
                }
        }
    } else if (*kind == "duhamel") {
        c.number(*b, p, "t", true, 0.0, 1e3);
        const auto m0 = c.integer(*b, p, "m0", true, 0, 8);
        c.integer(*b, p, "samples", true, m0 ? 2 * (*m0 + 1) : 2, 1000000000);
        c.choice(*b, p, "mode", true, {"zero", "finite"});
        if (const json* f = c.get(*b, p, "function", true)) check_function_ref(c, spec, *f, p + "function");
        c.number(*b, p, "target_rel_error", false, 0.0, 1e3);
        if (const json* s = c.object(*b, p, "scan", false)) {
            const std::string sp = p + "scan.";
            c.number(*s, sp, "t", true, 0.0, 1e3);
            if (const auto e = c.numbers(*s, sp, "eps", true, 2);
                e && std::any_of(e->begin(), e->end(), [](double x) { return !(x > 0.0 && x < 0.5); }))
                c.error(sp + "eps", "entries must lie in (0, 1/2)");
            c.integer(*s, sp, "samples", true, 1, 1000000000);
            c.integer(*s, sp, "creations", false, 0, 6);
        }
    }
    return r;
}

ValidationReport validate_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        ValidationReport r;
        r.errors.push_back({"", "cannot read " + path});
        return r;
    }
    try {
        return validate_config(json::parse(in));
    } catch (const json::parse_error& e) {
        ValidationReport r;
        r.errors.push_back({"", std::string("invalid JSON: ") + e.what()});
        return r;
    }
}

namespace {

// ---- execution ----------------------------------------------------------------

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

obs::TestFunction parse_function(const std::string& name, const json& f, double beta0) {
    const std::string type = f.at("type");
    obs::TestFunction h;
    if (type == "constant") {
        h = obs::TestFunction::constant(f.at("value"));
    } else if (type == "polynomial") {
        std::vector<obs::TestFunction::Monomial> terms;
        for (const auto& t : f.at("terms")) terms.push_back({t.at("coef"), t.at("exp").get<std::array<int, 3>>()});
        if (!(beta0 > 0.0)) throw std::invalid_argument("polynomial test functions need a law with beta0 > 0");
        h = obs::TestFunction::polynomial(terms, beta0);
    } else if (type == "bump") {
        h = obs::TestFunction::gaussian_bump(f.at("center").get<hs::Vec>(), f.at("width"), f.value("amplitude", 1.0));
    } else {
        h = obs::TestFunction::indicator_box(f.at("vlo").get<hs::Vec>(), f.at("vhi").get<hs::Vec>());
    }
    h.name = name;
    return h;
}

struct Context {
    json spec;
    std::string kind;
    std::uint64_t seed = 1;
    int threads = 1;
    fs::path dir;
    std::vector<std::string> artifacts;

    void write(const std::string& file, const std::string& content) {
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
        out << content;
        if (!out) throw std::runtime_error("write failed: " + (dir / file).string());
        artifacts.push_back(file);
    }

    ens::GCConfig system() const {
        const json& s = spec.at("system");
        ens::GCConfig cfg;
        cfg.dimension = s.at("dimension");
        cfg.diameter = s.value("diameter", 0.0);
        cfg.intensity = s.value("intensity", 0.0);
        cfg.law = parse_law(s.at("law"));
        cfg.horizon = s.value("horizon", 0.0);
        cfg.replicas = s.value("replicas", std::size_t{1});
        cfg.seed = seed;
        return cfg;
    }

    obs::TestFunction function(const std::string& name, double beta0) const {
        return parse_function(name, spec.at("functions").at(name), beta0);
    }
};

void log(const std::string& msg) { std::cerr << "[bglab] " << msg << '\n'; }

void run_simulate(Context& ctx) {
    const auto cfg = ctx.system();
    const json& b = ctx.spec.at("simulate");
    std::vector<ens::Observable> observables;
    for (const auto& o : b.at("observables")) {
        const std::string fname = o.at("function"), stat = o.at("statistic");
        const auto h = ctx.function(fname, cfg.law.beta0);
        const std::string id = fname + "_" + stat;
        observables.push_back(stat == "pi" ? obs::pi_observable(h, id) : obs::square_observable(h, id));
    }
    ens::RunOptions ro;
    ro.times = b.at("times").get<std::vector<double>>();
    ro.threads = ctx.threads;
    log("simulate: " + std::to_string(cfg.replicas) + " replicas, mu = " + fmt(cfg.mu()));
    const auto e = ens::run_replicas(cfg, observables, ro);
    for (const auto& id : e.observable_ids) {
        std::ostringstream os;
        ens::write_observable_csv(os, e, id);
        ctx.write(id + ".csv", os.str());
    }
    ctx.write("metadata.json", ens::metadata_json(e) + "\n");
    if (e.failed() == e.size()) throw std::runtime_error("all replicas failed: " + e.records.begin()->second.error);
    if (e.failed()) log(std::to_string(e.failed()) + " replicas failed (listed in metadata.json)");
}

void run_estimate(Context& ctx) {
    const auto cfg = ctx.system();
    const json& b = ctx.spec.at("estimate");
    const auto names = b.at("functions").get<std::vector<std::string>>();
    std::vector<ens::Observable> observables;
    for (const auto& n : names) {
        const auto h = ctx.function(n, cfg.law.beta0);
        observables.push_back(obs::pi_observable(h, "pi_" + n));
        observables.push_back(obs::square_observable(h, "square_" + n));
    }
    ens::RunOptions ro;
    ro.times = b.at("times").get<std::vector<double>>();
    ro.threads = ctx.threads;
    log("estimate: " + std::to_string(cfg.replicas) + " replicas, mu = " + fmt(cfg.mu()));
    const auto e = ens::run_replicas(cfg, observables, ro);
    const double mu = cfg.mu();
    std::set<std::string> q;
    for (const auto& x : b.at("quantities")) q.insert(x.get<std::string>());

    std::ostringstream os;
    os << "quantity,function_a,function_b,time,value,stderr\n";
    auto row = [&](const std::string& what, const std::string& a, const std::string& bname, double t,
                   obs::Estimate est) {
        os << what << ',' << a << ',' << bname << ',' << fmt(t) << ',' << fmt(est.value) << ',' << fmt(est.se) << '\n';
    };
    const double t0 = ro.times.front();
    for (double t : ro.times)
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto pi = e.values("pi_" + names[i], t);
            if (pi.size() < 2) throw std::runtime_error("fewer than two successful replicas");
            if (q.count("mean")) {
                const double m = obs::pairwise_sum(pi.data(), pi.size()) / pi.size();
                double ss = 0.0;
                for (double x : pi) ss += (x - m) * (x - m);
                row("mean", names[i], "", t, {m, std::sqrt(ss / (pi.size() - 1) / pi.size())});
            }
            if (q.count("f2")) row("f2", names[i], names[i], t, obs::f2_connected(pi, e.values("square_" + names[i], t), mu));
            if (q.count("log_mgf")) {
                std::vector<double> sums(pi.size());
                for (std::size_t r = 0; r < pi.size(); ++r) sums[r] = mu * pi[r];
                row("log_mgf", names[i], "", t, obs::log_mgf(sums, mu));
            }
            if (q.count("covariance")) {
                row("covariance_from_t0", names[i], names[i], t,
                    obs::covariance(e.values("pi_" + names[i], t0), pi, mu));
                for (std::size_t j = i + 1; j < names.size(); ++j)
                    row("covariance", names[i], names[j], t, obs::covariance(pi, e.values("pi_" + names[j], t), mu));
            }
        }
    ctx.write("estimates.csv", os.str());
    ctx.write("metadata.json", ens::metadata_json(e) + "\n");
}

kin::VelocityGrid parse_grid(const json& g, int d) {
    const std::string interp = g.value("interpolation", std::string("quadratic"));
    return kin::VelocityGrid(d, g.at("M"), g.at("vmax"), g.value("sphere_nodes", 0),
                             interp == "multilinear" ? kin::Interpolation::multilinear : kin::Interpolation::quadratic);
}

kin::VectorXd nodal(const kin::VelocityGrid& g, const obs::TestFunction& h) {
    kin::VectorXd v(static_cast<Eigen::Index>(g.size()));
    for (std::size_t i = 0; i < g.size(); ++i) v[static_cast<Eigen::Index>(i)] = h(hs::Vec{0, 0, 0}, g.node(i));
    return v;
}

void run_kinetic(Context& ctx) {
    const json& s = ctx.spec.at("system");
    const json& b = ctx.spec.at("kinetic");
    const int d = s.at("dimension");
    const auto law = parse_law(s.at("law"));
    const auto g = parse_grid(b.at("grid"), d);
    const double T = b.at("T"), dt = b.at("dt");
    const auto names = b.at("functions").get<std::vector<std::string>>();
    std::vector<obs::TestFunction> hs_;
    std::vector<kin::VectorXd> hv;
    for (const auto& n : names) {
        hs_.push_back(ctx.function(n, law.beta0));
        hv.push_back(nodal(g, hs_.back()));
    }
    log("kinetic: grid " + std::to_string(g.size()) + " nodes, T = " + fmt(T));
    const auto path = kin::solve_boltzmann(g, kin::discretize(g, law), T, dt);
    std::ostringstream os;
    os << "time,H";
    for (const auto& n : names) os << ',' << n;
    os << '\n';
    for (std::size_t k = 0; k < path.times.size(); ++k) {
        os << fmt(path.times[k]) << ',' << fmt(path.H[k]);
        for (const auto& v : hv) os << ',' << fmt(kin::inner(g, path.f[k], v));
        os << '\n';
    }
    ctx.write("moments.csv", os.str());

    if (const auto it = b.find("dsmc"); it != b.end()) {
        const int N = it->at("N");
        const auto times = it->value("times", std::vector<double>{0.0, T / 2, T});
        log("dsmc: N = " + std::to_string(N));
        const auto r = kin::dsmc_relax(law, d, N, times, it->value("rate_scale", 1.2), ctx.seed);
        std::ostringstream ds;
        ds << "time";
        for (const auto& n : names) ds << ',' << n << ',' << n << "_stderr";
        ds << '\n';
        for (std::size_t k = 0; k < r.times.size(); ++k) {
            ds << fmt(r.times[k]);
            for (const auto& h : hs_) {
                std::vector<double> x;
                for (const auto& v : r.velocities[k]) x.push_back(law.mass * h(hs::Vec{0, 0, 0}, v));
                const double m = obs::pairwise_sum(x.data(), x.size()) / x.size();
                double ss = 0.0;
                for (double y : x) ss += (y - m) * (y - m);
                ds << ',' << fmt(m) << ',' << fmt(std::sqrt(ss / (x.size() - 1) / x.size()));
            }
            ds << '\n';
        }
        ctx.write("dsmc.csv", ds.str());
    }
}

void run_covariance(Context& ctx) {
    const json& s = ctx.spec.at("system");
    const json& b = ctx.spec.at("covariance");
    const int d = s.at("dimension");
    const auto law = parse_law(s.at("law"));
    const auto g = parse_grid(b.at("grid"), d);
    const double T = b.at("T"), dt = b.at("dt");
    const bool eq = b.value("equilibrium", false);
    const kin::VectorXd f0 = eq ? kin::maxwellian(g, law.beta, law.mass) : kin::discretize(g, law);
    const auto path = eq ? kin::DensityPath::constant(f0, T) : kin::solve_boltzmann(g, f0, T, dt);
    log(std::string("covariance: ") + (eq ? "equilibrium" : "relaxing") + " path, grid " + std::to_string(g.size()));
    const auto C = kin::covariance_evolution(g, path, kin::equilibrium_covariance(g, f0), T, dt).C.back();
    std::map<std::string, kin::VectorXd> vec;
    auto get = [&](const std::string& n) -> const kin::VectorXd& {
        if (!vec.count(n)) vec[n] = nodal(g, ctx.function(n, law.beta0));
        return vec.at(n);
    };
    std::ostringstream os;
    os << "phi,psi,evolution,spohn,predicted_defect,residual\n";
    std::vector<std::string> seen;
    for (const auto& pr : b.at("pairs")) {
        const std::string a = pr[0], c = pr[1];
        const auto& phi = get(a);
        const auto& psi = get(c);
        const double evo = phi.dot(C * psi);
        const double sp = kin::spohn_covariance(g, path, phi, psi, T, dt);
        const double defect = kin::dual_route_defect(g, path, phi, psi, T, dt);
        os << a << ',' << c << ',' << fmt(evo) << ',' << fmt(sp) << ',' << fmt(defect) << ',' << fmt(evo - sp - defect)
           << '\n';
        for (const auto& n : {a, c})
            if (std::find(seen.begin(), seen.end(), n) == seen.end()) seen.push_back(n);
    }
    ctx.write("covariance.csv", os.str());
    if (eq) {
        std::ostringstream fd;
        fd << "function,gap\n";
        for (const auto& n : seen) fd << n << ',' << fmt(kin::fluctuation_dissipation_gap(g, f0, get(n), T, dt)) << '\n';
        ctx.write("fd_gap.csv", fd.str());
    }
}

void run_duhamel(Context& ctx) {
    const auto cfg = ctx.system();
    const json& b = ctx.spec.at("duhamel");
    const auto h = ctx.function(b.at("function"), cfg.law.beta0);
    duh::DuhamelOptions opt;
    opt.m0 = b.at("m0");
    opt.samples = b.at("samples");
    opt.mode = b.at("mode") == "finite" ? duh::Mode::finite : duh::Mode::zero;
    opt.target_rel_error = b.value("target_rel_error", 0.0);
    opt.threads = ctx.threads;
    const double t = b.at("t");
    log("duhamel: t = " + fmt(t) + ", m0 = " + std::to_string(opt.m0) + ", " + std::to_string(opt.samples) +
        " samples");
    const auto e = duh::estimate_F1_duhamel(cfg, t, h, opt);
    std::ostringstream os;
    os << "order,value,stderr,positive,negative,mass,samples,rejected\n";
    std::size_t samples = 0, rejected = 0;
    for (const auto& o : e.orders) {
        os << o.m << ',' << fmt(o.value) << ',' << fmt(o.se) << ',' << fmt(o.positive) << ',' << fmt(o.negative) << ','
           << fmt(o.mass) << ',' << o.samples << ',' << o.rejected << '\n';
        samples += o.samples;
        rejected += o.rejected;
    }
    os << "total," << fmt(e.value) << ',' << fmt(e.se) << ",,,," << samples << ',' << rejected << '\n';
    ctx.write("duhamel.csv", os.str());
    ojson summary;
    summary["t"] = t;
    summary["value"] = e.value;
    summary["stderr"] = e.se;
    summary["series_ratio"] = e.series_ratio;
    summary["tail_bound"] = std::isfinite(e.tail_bound) ? ojson(e.tail_bound) : ojson("inf");
    summary["dilute"] = e.dilute;
    summary["target_met"] = e.target_met;
    if (!e.dilute) log("warning: series ratio " + fmt(e.series_ratio) + " >= 0.5, truncation not reliable");

    if (const auto it = b.find("scan"); it != b.end()) {
        duh::ScanOptions so;
        so.creations = it->value("creations", 1);
        so.threads = ctx.threads;
        const auto eps = it->at("eps").get<std::vector<double>>();
        const auto sc = duh::clustering_probability_scan(cfg, it->at("t"), eps, it->at("samples"), so);
        std::ostringstream ss;
        ss << "eps,mu,samples,events,p,lo,hi\n";
        for (const auto& r : sc.rows)
            ss << fmt(r.eps) << ',' << fmt(r.mu) << ',' << r.samples << ',' << r.events << ',' << fmt(r.p) << ','
               << fmt(r.lo) << ',' << fmt(r.hi) << '\n';
        ctx.write("scan.csv", ss.str());
        summary["scan_slope"] = std::isfinite(sc.slope) ? ojson(sc.slope) : ojson(nullptr);
        summary["scan_starved"] = sc.starved;
    }
    ctx.write("duhamel.json", summary.dump(2) + "\n");
}

void run_selftest(Context& ctx) {
    int max_n = 6;
    if (const auto it = ctx.spec.find("selftest"); it != ctx.spec.end()) max_n = it->value("max_n", 6);
    const auto rows = comb::selftest(max_n);
    std::ostringstream os;
    os << "check,n,expected,got,pass\n";
    std::size_t failed = 0;
    for (const auto& r : rows) {
        os << r.check << ',' << r.n << ',' << r.expected << ',' << r.got << ',' << (r.pass ? "true" : "false") << '\n';
        std::fprintf(stderr, "%-31s n=%d %-24s %-24s %s\n", r.check.c_str(), r.n, r.expected.c_str(), r.got.c_str(),
                     r.pass ? "PASS" : "FAIL");
        failed += !r.pass;
    }
    ctx.write("combinatorics.csv", os.str());
    if (failed) throw std::runtime_error(std::to_string(failed) + " combinatorics self-test rows failed");
}

std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr))
        throw std::runtime_error("sha256 failed");
    std::string hex;
    char b[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(b, sizeof b, "%02x", md[i]);
        hex += b;
    }
    return hex;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

ojson error_json(const std::string& kind, const std::string& message, const std::vector<Finding>& findings, int code) {
    ojson e;
    e["status"] = "error";
    e["kind"] = kind;
    e["message"] = message;
    e["exit_code"] = code;
    ojson f = ojson::array();
    for (const auto& x : findings) f.push_back({{"field", x.field}, {"message", x.message}});
    e["findings"] = f;
    return e;
}

}  // namespace

RunResult run_experiment(const std::string& path, const RunOverrides& overrides) {
    std::ifstream in(path);
    if (!in) {
        RunResult r;
        r.exit_code = 2;
        r.error = error_json("schema", "cannot read " + path, {}, 2);
        return r;
    }
    json spec;
    try {
        spec = json::parse(in);
    } catch (const json::parse_error& e) {
        RunResult r;
        r.exit_code = 2;
        r.error = error_json("schema", std::string("invalid JSON: ") + e.what(), {}, 2);
        return r;
    }
    return run_experiment(spec, overrides);
}

RunResult run_experiment(const json& input, const RunOverrides& ov) {
    RunResult res;
    const auto start = std::chrono::steady_clock::now();
    try {
        json spec = input;
        if (spec.is_object() && spec.value("format", std::string()) == "bglab-provenance") spec = spec.at("config");
        if (!spec.is_object()) throw SchemaError("", "spec must be a JSON object");
        if (ov.kind) {
            if (spec.contains("kind") && spec["kind"] != *ov.kind)
                throw SchemaError("kind", "spec kind " + spec["kind"].dump() + " does not match subcommand '" + *ov.kind + "'");
            spec["kind"] = *ov.kind;
        }
        if (ov.seed) spec["seed"] = *ov.seed;
        if (ov.threads < 1) throw SchemaError("threads", "must be >= 1");
        const auto report = validate_config(spec);
        for (const auto& w : report.warnings) log("warning: " + w.field + ": " + w.message);
        if (!report.ok()) throw SchemaError(report.errors);

        Context ctx;
        ctx.kind = spec.at("kind");
        ctx.seed = spec.at("seed").get<std::uint64_t>();
        ctx.threads = ov.threads;
        const std::string name = spec.value("name", ctx.kind);
        if (ov.output) ctx.dir = *ov.output;
        else if (spec.contains("output")) ctx.dir = spec.at("output").get<std::string>();
        else {
            const char* root = std::getenv(kOutputRootEnv);
            ctx.dir = fs::path(root && *root ? root : "bglab_out") / name;
        }
        res.output_dir = ctx.dir.string();
        fs::create_directories(ctx.dir);
        spec.erase("output");  // the artifact directory is not part of the experiment
        ctx.spec = spec;

        if (ctx.kind == "simulate") run_simulate(ctx);
        else if (ctx.kind == "estimate") run_estimate(ctx);
        else if (ctx.kind == "kinetic") run_kinetic(ctx);
        else if (ctx.kind == "covariance") run_covariance(ctx);
        else if (ctx.kind == "duhamel") run_duhamel(ctx);
        else run_selftest(ctx);

        ojson prov;
        prov["format"] = "bglab-provenance";
        prov["tool"] = "bglab";
        prov["version"] = kToolVersion;
        prov["schema_version"] = kSchemaVersion;
        prov["kind"] = ctx.kind;
        prov["seed"] = ctx.seed;
        prov["generator"] = Philox::kName;
        prov["config"] = ojson::parse(spec.dump());
        ojson arts = ojson::array();
        auto files = ctx.artifacts;
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const auto data = read_file(ctx.dir / f);
            arts.push_back({{"file", f}, {"bytes", data.size()}, {"sha256", sha256_hex(data)}});
        }
        prov["artifacts"] = arts;
        ctx.write("provenance.json", prov.dump(2) + "\n");
        res.artifacts = ctx.artifacts;

        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        ojson timing;
        timing["wall_seconds"] = wall;
        timing["threads"] = ctx.threads;
        std::ofstream(ctx.dir / "timing.json") << timing.dump(2) << "\n";
        log("done in " + fmt(wall) + " s, artifacts in " + ctx.dir.string());
    } catch (const SchemaError& e) {
        res.exit_code = 2;
        res.error = error_json("schema", e.what(), e.findings, 2);
    } catch (const std::exception& e) {
        res.exit_code = 1;
        res.error = error_json("runtime", e.what(), {}, 1);
    }
    return res;
}

}  // namespace bglab::cli
