from bioacoustic.audio_io import build_manifest
from bioacoustic.evaluate import evaluate_run
from bioacoustic.management.base import PipelineCommand


class Command(PipelineCommand):
    help = 'Event-based precision, recall and F1 of a detection CSV, per subset and pooled'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('pred_csv', type=str, help='Detection CSV written by infer')
        parser.add_argument('ref_dir', type=str, help='Reference WAV files with annotation CSVs')
        parser.add_argument('--out-csv', type=str, default=None,
                            help='Also write the report as CSV (subset,TP,FP,FN,precision,recall,f1)')

    def run(self, config, **options):
        report = evaluate_run(options['pred_csv'], build_manifest(options['ref_dir'], split='eval'),
                              config.evaluate, config.fewshot.n_support)
        self.stdout.write(report.format_table())
        if options['out_csv']:
            report.write_csv(options['out_csv'])
            self.stdout.write(self.style.SUCCESS(f'report written to {options["out_csv"]}'))
