#include <CLI11.hpp>

#include "dhan/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Recurrent glimpse classifier with hard and soft attention"};
  app.require_subcommand(1);

  dhan::TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write metrics and checkpoints");
  train_cmd->add_option("--config", train.config, "key = value configuration file");
  auto* ds = train_cmd->add_option("--dataset", train.dataset, "root/<class>/<patient>/<magnification>/<image>.png");
  auto* syn = train_cmd->add_flag("--synthetic", train.synthetic, "Use the generated cross/ring task");
  ds->excludes(syn);
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");

  dhan::EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint; prints acc, prr, n_images, n_patients");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  auto* eds = eval_cmd->add_option("--dataset", eval.dataset);
  auto* esyn = eval_cmd->add_flag("--synthetic", eval.synthetic, "Evaluate on the generated test split");
  eds->excludes(esyn);
  eval_cmd->add_option("--magnification", eval.magnification, "Keep only images at this magnification");

  dhan::TraceOptions trace;
  auto* trace_cmd = app.add_subcommand("trace", "Write the glimpse sequence for one image as JSON lines");
  trace_cmd->add_option("--checkpoint", trace.checkpoint)->required();
  trace_cmd->add_option("--image", trace.image)->required();
  trace_cmd->add_option("--out", trace.out)->required();
  trace_cmd->add_option("--overlay", trace.overlay, "PNG copy of the image with glimpse rectangles");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (train_cmd->parsed()) return dhan::cmd_train(train);
  if (eval_cmd->parsed()) return dhan::cmd_eval(eval);
  return dhan::cmd_trace(trace);
}
