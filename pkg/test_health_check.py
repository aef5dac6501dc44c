"""Tests for the health and status endpoints."""

import os
import shutil
import sys
import tempfile
import unittest
from collections import OrderedDict
from unittest.mock import patch

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import storage
from health_check import app
from storage import RunStorage


class TestHealthCheck(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.client = app.test_client()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_missing_run_directory(self):
        with patch('health_check.Config.OUTPUT_PATH', os.path.join(self.temp_dir, "absent")):
            response = self.client.get('/health')
        self.assertEqual(response.status_code, 500)
        self.assertEqual(response.get_json()["message"], "Run directory not found")

    def test_run_without_manifest(self):
        with patch('health_check.Config.OUTPUT_PATH', self.temp_dir):
            response = self.client.get('/health')
        self.assertEqual(response.status_code, 500)
        self.assertEqual(response.get_json()["message"], "Run manifest not found")

    def test_healthy_run(self):
        RunStorage(self.temp_dir).write_manifest("odometry")
        with patch('health_check.Config.OUTPUT_PATH', self.temp_dir):
            response = self.client.get('/health')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.get_json()["status"], "healthy")

    def test_status_summarizes_training(self):
        run = RunStorage(self.temp_dir)
        run.write_manifest("train-toy", {"samples": 2})
        for epoch in range(1, 8):
            run.append_loss(epoch, 1.0 / epoch, 2e-4)
        storage.save_checkpoint(run.checkpoint_path("epoch_007"), OrderedDict(w=np.ones(1)))
        run.append_diagnostics({"event": "epoch"})
        run.save_metrics({"t_rel": 0.02})

        with patch('health_check.Config.OUTPUT_PATH', self.temp_dir):
            response = self.client.get('/status')
        self.assertEqual(response.status_code, 200)
        body = response.get_json()
        self.assertEqual(body["manifest"]["outputs"], {"samples": 2})
        self.assertEqual(body["training"]["epochs_logged"], 7)
        self.assertEqual([row["epoch"] for row in body["training"]["recent_losses"]], [3, 4, 5, 6, 7])
        self.assertTrue(body["training"]["latest_checkpoint"].endswith("epoch_007"))
        self.assertEqual(body["metrics"], {"t_rel": 0.02})
        self.assertEqual(body["diagnostics_count"], 1)


if __name__ == '__main__':
    unittest.main()
